//! Runs every mining policy over one batch and shows how the chosen
//! negatives differ.

use tripletspace::dataio::{generate_synthetic, SyntheticSpec};
use tripletspace::geometry::pairwise_sqdist;
use tripletspace::loss::{batch_triplet_loss, Margin};
use tripletspace::mining::{
    assemble_batch, select_triplets, BatchSpec, MiningPolicy, NegativeMode, PositiveMode,
};
use tripletspace::model::new_network;
use tripletspace::NetConfig;

fn main() -> tripletspace::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::default())?.all();
    let spec = BatchSpec {
        faces_per_identity: 4,
        identities_per_batch: 4,
        random_negatives: 4,
        seed: 3,
    };
    let batch = assemble_batch(&data, &spec, 0)?;
    let net = new_network(NetConfig::new(data.inputs.cols(), vec![32], 8))?;
    let e = net.embed(&batch.inputs)?;
    let d = pairwise_sqdist(&e)?;

    for nm in [
        NegativeMode::SemiHard,
        NegativeMode::Hardest,
        NegativeMode::Random,
    ] {
        for pm in [PositiveMode::AllPairs, PositiveMode::Hardest] {
            let policy = MiningPolicy::new(nm, pm);
            let t = select_triplets(&d, &batch.labels, Margin::DEFAULT, &policy)?;
            let loss = batch_triplet_loss(&e, &t, Margin::DEFAULT)?;
            let semi = t
                .iter()
                .filter(|t| d.get(t.anchor, t.negative) > d.get(t.anchor, t.positive))
                .count();
            println!(
                "{nm:?}/{pm:?}: {} triplets, {} active, {semi} with d_an > d_ap, mean loss {:.4}",
                t.len(),
                loss.active,
                loss.total / t.len() as f64
            );
        }
    }
    Ok(())
}
