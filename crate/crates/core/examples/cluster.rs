//! Groups embeddings by agglomerative clustering and scores the result
//! against the true identities with pairwise F1.

use tripletspace::cluster::{agglomerative_cluster, pairwise_f1, Linkage};
use tripletspace::dataio::{generate_synthetic, SyntheticSpec};
use tripletspace::geometry::l2_normalize;

fn main() -> tripletspace::Result<()> {
    let set = generate_synthetic(&SyntheticSpec {
        num_identities: 12,
        samples_per_identity: 10,
        distortion_layers: 0,
        input_dim: 8,
        ..Default::default()
    })?
    .all();
    let e = (0..set.len())
        .map(|i| l2_normalize(set.inputs.row(i)))
        .collect::<tripletspace::Result<Vec<_>>>()?;
    for linkage in [Linkage::Single, Linkage::Average, Linkage::Complete] {
        for cutoff in [0.5, 1.0, 1.5] {
            let c = agglomerative_cluster(&e, cutoff, linkage)?;
            let s = pairwise_f1(&c, &set.labels)?;
            println!(
                "{linkage:>8} cutoff {cutoff}: {:>3} clusters, precision {:.3}, recall {:.3}, F1 {:.3}",
                c.num_clusters, s.precision, s.recall, s.f1
            );
        }
    }
    Ok(())
}
