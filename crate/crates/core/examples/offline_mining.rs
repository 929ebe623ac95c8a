//! Mines triplets over a whole subset with a checkpointed network and writes
//! them as row ids.

use tripletspace::dataio::{generate_synthetic, SyntheticSpec};
use tripletspace::loss::Margin;
use tripletspace::mining::{offline_mine, read_triplet_dump, write_triplet_dump, MiningPolicy};
use tripletspace::model::new_network;
use tripletspace::{EmbeddingNet, NetConfig};

fn main() -> tripletspace::Result<()> {
    let set = generate_synthetic(&SyntheticSpec {
        num_identities: 6,
        samples_per_identity: 5,
        ..Default::default()
    })?
    .all();
    let checkpoint = new_network(NetConfig::new(set.inputs.cols(), vec![32], 8))?.save_checkpoint();
    let net = EmbeddingNet::load_checkpoint(&checkpoint)?;

    let triplets = offline_mine(&net, &set, Margin::DEFAULT, &MiningPolicy::default())?;
    let mut dump = Vec::new();
    write_triplet_dump(&mut dump, &triplets)?;
    let text = String::from_utf8(dump).expect("ascii");
    println!("{} triplets; first lines:", triplets.len());
    for line in text.lines().take(5) {
        println!("  {line}");
    }
    assert_eq!(read_triplet_dump(&text)?, triplets);
    Ok(())
}
