//! Packs unit embeddings into one signed byte per dimension and measures the
//! round-trip error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tripletspace::eval::{decode_quantized, dequantize, encode_quantized, quantize};
use tripletspace::geometry::{l2_normalize, squared_distance};

fn main() -> tripletspace::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = (0..1000)
        .map(|_| {
            l2_normalize(
                &(0..128)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>(),
            )
        })
        .collect::<tripletspace::Result<Vec<_>>>()?;
    let codes: Vec<_> = e.iter().map(quantize).collect();
    let bytes = encode_quantized(&codes)?;
    println!(
        "{} embeddings -> {} bytes ({} per embedding)",
        e.len(),
        bytes.len(),
        codes[0].codes.len()
    );

    let back = decode_quantized(&bytes)?;
    let mut worst = 0.0f64;
    for (orig, q) in e.iter().zip(&back) {
        worst = worst.max(squared_distance(orig, &dequantize(q)?)?);
    }
    println!("worst squared distance after round trip: {worst:.2e}");
    Ok(())
}
