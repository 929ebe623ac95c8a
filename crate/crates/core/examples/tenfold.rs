//! Ten-fold threshold selection: each fold is scored at the threshold that
//! maximizes accuracy on the other nine.

use tripletspace::dataio::{generate_synthetic, SyntheticSpec};
use tripletspace::eval::{default_threshold_grid, tenfold_accuracy, DistanceMap, Folds, PairSet};
use tripletspace::geometry::l2_normalize;

fn main() -> tripletspace::Result<()> {
    // The generator's latent centers stand in for a well trained embedding.
    let set = generate_synthetic(&SyntheticSpec {
        distortion_layers: 0,
        input_dim: 8,
        ..Default::default()
    })?
    .all();
    let e = (0..set.len())
        .map(|i| l2_normalize(set.inputs.row(i)))
        .collect::<tripletspace::Result<Vec<_>>>()?;
    let pairs = PairSet::balanced(&set.labels, 0);
    let d = DistanceMap::from_embeddings(&e, &pairs)?;
    let r = tenfold_accuracy(
        &d,
        &pairs,
        &Folds::balanced(&pairs, 0),
        &default_threshold_grid(),
    )?;
    for (k, (a, t)) in r.fold_accuracies.iter().zip(&r.fold_thresholds).enumerate() {
        println!("fold {k}: accuracy {a:.4} at threshold {t}");
    }
    println!(
        "mean {:.4} +- {:.4}, threshold span {:.3}",
        r.mean_accuracy,
        r.std_error,
        r.threshold_span()
    );
    Ok(())
}
