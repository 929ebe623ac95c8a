//! Trains a second model whose embeddings stay comparable with a frozen first
//! model: the new last layer is fitted first, then the whole network.

use tripletspace::dataio::{generate_synthetic, split_by_identity, Split, SyntheticSpec};
use tripletspace::eval::{default_threshold_grid, val_at_far, PairSet, VerificationReport};
use tripletspace::harmonic::{
    cross_version_report, embed_map, HarmonicConfig, HarmonicSession, Stage,
};
use tripletspace::mining::BatchSpec;
use tripletspace::model::new_network;
use tripletspace::{train, NetConfig, TrainConfig};

fn main() -> tripletspace::Result<()> {
    let data = split_by_identity(&generate_synthetic(&SyntheticSpec::default())?, 0.3, 0)?;
    let train_set = data.subset(Split::Train);
    let net = |seed| {
        new_network(NetConfig {
            init_scale: 10.0,
            ..NetConfig::new(64, vec![64, 64], 16).with_seed(seed)
        })
    };
    let cfg = TrainConfig {
        steps: 500,
        batch: BatchSpec {
            faces_per_identity: 10,
            identities_per_batch: 5,
            ..Default::default()
        },
        ..Default::default()
    };
    let (v1, _) = train(net(0)?, &train_set, &cfg)?;
    let v1_train = embed_map(&v1, &train_set)?;

    let hcfg = HarmonicConfig {
        train: TrainConfig {
            seed: 1,
            ..cfg.clone()
        },
        ..Default::default()
    };
    let mut session = HarmonicSession::new(net(1)?, &v1_train, &train_set, &hcfg)?;
    session.run_stage(Stage::LastLayerOnly, 300)?;
    session.run_stage(Stage::FullNetwork, 500)?;
    let (v2, log) = session.finish();
    println!(
        "harmonic training: {} steps, final loss {:.4}",
        log.records.len(),
        log.records.last().unwrap().loss
    );

    let at = |r: &VerificationReport| val_at_far(r, 1e-2).map(|op| op.val);
    for (name, mut set) in [
        ("train", train_set.clone()),
        ("hold-out", data.subset(Split::Holdout)),
    ] {
        // Pairs index rows, so key the embeddings by row as well.
        set.ids = (0..set.len()).collect();
        let r = cross_version_report(
            &embed_map(&v1, &set)?,
            &embed_map(&v2, &set)?,
            &PairSet::all_pairs(&set.labels),
            &default_threshold_grid(),
        )?;
        println!(
            "{name}: VAL v1-v1 {:.3}, mixed {:.3}, v2-v2 {:.3}",
            at(&r.v1_v1)?,
            at(&r.mixed)?,
            at(&r.v2_v2)?
        );
    }
    Ok(())
}
