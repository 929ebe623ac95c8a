//! Stops a run halfway, saves network and optimizer state, and shows that the
//! resumed run ends bit-identical to an uninterrupted one.

use tripletspace::dataio::{generate_synthetic, SyntheticSpec};
use tripletspace::model::new_network;
use tripletspace::trainer::{AdaGradState, Trainer};
use tripletspace::{train, EmbeddingNet, NetConfig, TrainConfig};

fn main() -> tripletspace::Result<()> {
    let set = generate_synthetic(&SyntheticSpec::default())?.all();
    let net = new_network(NetConfig::new(set.inputs.cols(), vec![32], 16))?;
    let cfg = TrainConfig {
        steps: 60,
        ..Default::default()
    };
    let (full, _) = train(net.clone(), &set, &cfg)?;

    let mut t = Trainer::new(net, &set, &cfg)?;
    for _ in 0..30 {
        t.step()?;
    }
    let (half, state, _) = t.into_parts();
    let (ckpt, opt) = (half.save_checkpoint(), state.to_bytes());
    println!("saved {} + {} bytes at step 30", ckpt.len(), opt.len());

    let resumed = Trainer::resume(
        EmbeddingNet::load_checkpoint(&ckpt)?,
        AdaGradState::from_bytes(&opt)?,
        30,
        &set,
        &cfg,
    )?;
    let (net, _) = resumed.run()?;
    println!(
        "resumed equals uninterrupted: {}",
        net.save_checkpoint() == full.save_checkpoint()
    );
    Ok(())
}
