//! Sweeps a threshold grid over pair distances and reads off the operating
//! point at a target false accept rate.

use tripletspace::eval::{
    compute_val_far, default_threshold_grid, exact_val_at_far, roc_sweep, val_at_far, DistanceMap,
    PairSet,
};
use tripletspace::geometry::l2_normalize;

fn main() -> tripletspace::Result<()> {
    let mut d = DistanceMap::new();
    d.insert((0, 1), 0.5);
    d.insert((2, 3), 1.5);
    d.insert((0, 2), 1.0);
    d.insert((1, 3), 3.0);
    let pairs = PairSet::new(vec![(0, 1), (2, 3)], vec![(0, 2), (1, 3)])?;
    for t in [0.4, 1.0, 1.2, 1.5, 4.0] {
        let (val, far) = compute_val_far(&d, &pairs, t)?;
        println!("threshold {t}: VAL {val}, FAR {far}");
    }

    // Four noisy identities on a 3-sphere.
    let mut e = Vec::new();
    let mut labels = Vec::new();
    for id in 0..4u32 {
        for k in 0..6 {
            let j = 0.15 * ((k * 7 + id as usize * 3) % 5) as f64 - 0.3;
            let mut v = vec![j; 4];
            v[id as usize] = 1.0;
            e.push(l2_normalize(&v)?);
            labels.push(id);
        }
    }
    let pairs = PairSet::all_pairs(&labels);
    let d = DistanceMap::from_embeddings(&e, &pairs)?;
    let roc = roc_sweep(&d, &pairs, &default_threshold_grid())?;
    let op = val_at_far(&roc, 0.01)?;
    println!(
        "grid operating point: VAL {:.3} at threshold {} (FAR {:.4})",
        op.val, op.threshold, op.far
    );
    let exact = exact_val_at_far(&d, &pairs, 0.01)?;
    println!(
        "exact operating point: VAL {:.3} (FAR {:.4})",
        exact.val, exact.far
    );
    let mut csv = Vec::new();
    roc.write_csv(&mut csv)?;
    println!(
        "roc.csv has {} lines",
        csv.iter().filter(|&&b| b == b'\n').count()
    );
    Ok(())
}
