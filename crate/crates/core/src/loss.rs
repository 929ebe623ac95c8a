//! Triplet hinge loss `[d(a,p) - d(a,n) + margin]_+` and its gradients with
//! respect to the normalized embeddings.

use crate::error::{Error, Result};
use crate::geometry::{sq_dist, Embedding, Matrix};

/// Required squared-distance gap between negatives and positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin(f64);

impl Margin {
    pub const DEFAULT: Margin = Margin(0.2);

    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidTrainConfig(format!(
                "margin must be >= 0, got {alpha}"
            )));
        }
        Ok(Margin(alpha))
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

impl Default for Margin {
    fn default() -> Self {
        Margin::DEFAULT
    }
}

/// Batch indices of an (anchor, positive, negative) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Triplet {
            anchor,
            positive,
            negative,
        }
    }

    /// Checks the label constraints a triplet must satisfy.
    pub fn is_valid_for<L: PartialEq>(&self, labels: &[L]) -> bool {
        self.anchor != self.positive
            && labels[self.anchor] == labels[self.positive]
            && labels[self.anchor] != labels[self.negative]
    }
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

fn hinge_argument(a: &[f64], p: &[f64], n: &[f64], m: Margin) -> f64 {
    sq_dist(a, p) - sq_dist(a, n) + m.alpha()
}

pub fn triplet_loss(a: &Embedding, p: &Embedding, n: &Embedding, m: Margin) -> Result<f64> {
    check_dims(a, p)?;
    check_dims(a, n)?;
    Ok(hinge_argument(a.values(), p.values(), n.values(), m).max(0.0))
}

/// Gradients of one triplet term.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub loss: f64,
}

/// Writes the three gradients into the given buffers (added, not assigned)
/// and returns the hinge argument.
///
/// Zero gradient when the argument is `<= 0`: the kink itself takes the
/// inactive branch.
fn accumulate_grads(
    a: &[f64],
    p: &[f64],
    n: &[f64],
    m: Margin,
    mut sink: impl FnMut(usize, f64, f64, f64),
) -> f64 {
    let arg = hinge_argument(a, p, n, m);
    if arg > 0.0 {
        for k in 0..a.len() {
            sink(
                k,
                2.0 * (n[k] - p[k]),
                -2.0 * (a[k] - p[k]),
                2.0 * (a[k] - n[k]),
            );
        }
    }
    arg
}

pub fn triplet_loss_grads(
    a: &Embedding,
    p: &Embedding,
    n: &Embedding,
    m: Margin,
) -> Result<TripletGrads> {
    check_dims(a, p)?;
    check_dims(a, n)?;
    let d = a.dim();
    let mut out = TripletGrads {
        anchor: vec![0.0; d],
        positive: vec![0.0; d],
        negative: vec![0.0; d],
        loss: 0.0,
    };
    let arg = accumulate_grads(a.values(), p.values(), n.values(), m, |k, ga, gp, gn| {
        out.anchor[k] = ga;
        out.positive[k] = gp;
        out.negative[k] = gn;
    });
    out.loss = arg.max(0.0);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    /// `B x d` gradient of `total` with respect to each embedding.
    pub grad: Matrix,
    /// Triplets with a strictly positive hinge argument.
    pub active: usize,
}

/// Sums the loss over `triplets`, accumulating gradients row by row in
/// triplet order.
pub fn batch_triplet_loss(
    embeddings: &[Embedding],
    triplets: &[Triplet],
    m: Margin,
) -> Result<BatchLoss> {
    let batch = embeddings.len();
    let dim = embeddings.first().map_or(0, Embedding::dim);
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
    }
    let mut grad = Matrix::zeros(batch, dim);
    let mut total = 0.0;
    let mut active = 0;
    for t in triplets {
        for index in [t.anchor, t.positive, t.negative] {
            if index >= batch {
                return Err(Error::IndexOutOfRange { index, batch });
            }
        }
        let (a, p, n) = (
            embeddings[t.anchor].values(),
            embeddings[t.positive].values(),
            embeddings[t.negative].values(),
        );
        let g = grad.as_mut_slice();
        let arg = accumulate_grads(a, p, n, m, |k, ga, gp, gn| {
            g[t.anchor * dim + k] += ga;
            g[t.positive * dim + k] += gp;
            g[t.negative * dim + k] += gn;
        });
        if arg > 0.0 {
            total += arg;
            active += 1;
        }
    }
    Ok(BatchLoss {
        total,
        grad,
        active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(v: &[f64]) -> Embedding {
        l2_normalize(v).unwrap()
    }

    fn alpha() -> Margin {
        Margin::new(0.2).unwrap()
    }

    #[test]
    fn loss_examples() {
        // d(a,p) = 0.5, d(a,n) = 1.0 on the unit circle: cos = 0.75 and 0.5.
        let a = e(&[1.0, 0.0]);
        let p = e(&[0.75, (1.0f64 - 0.5625).sqrt()]);
        let n = e(&[0.5, -(0.75f64).sqrt()]);
        assert_eq!(triplet_loss(&a, &p, &n, alpha()).unwrap(), 0.0);

        let p = e(&[0.0, 1.0]);
        let n = e(&[0.0, -1.0]);
        assert!((triplet_loss(&a, &p, &n, alpha()).unwrap() - 0.2).abs() < 1e-15);

        assert_eq!(
            triplet_loss(&a, &a, &e(&[-1.0, 0.0]), alpha()).unwrap(),
            0.0
        );
        assert!(triplet_loss(&a, &a, &e(&[1.0, 0.0, 0.0]), alpha()).is_err());
        assert!(Margin::new(-0.1).is_err());
    }

    #[test]
    fn grad_examples() {
        let (a, p, n) = (e(&[1.0, 0.0]), e(&[0.0, 1.0]), e(&[0.0, -1.0]));
        let g = triplet_loss_grads(&a, &p, &n, alpha()).unwrap();
        assert_eq!(g.anchor, vec![0.0, -4.0]);
        assert_eq!(g.positive, vec![-2.0, 2.0]);
        assert_eq!(g.negative, vec![2.0, 2.0]);

        // Same values from central differences on the raw (unnormalized) loss.
        let f =
            |v: [f64; 6]| -> f64 { hinge_argument(&v[0..2], &v[2..4], &v[4..6], alpha()).max(0.0) };
        let base = [1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let expected = [0.0, -4.0, -2.0, 2.0, 2.0, 2.0];
        for k in 0..6 {
            let mut up = base;
            let mut down = base;
            up[k] += 1e-6;
            down[k] -= 1e-6;
            let fd = (f(up) - f(down)) / 2e-6;
            assert!((fd - expected[k]).abs() < 1e-6, "{k}: {fd}");
        }

        let inactive = triplet_loss_grads(&a, &a, &e(&[-1.0, 0.0]), alpha()).unwrap();
        assert!(inactive
            .anchor
            .iter()
            .chain(&inactive.positive)
            .chain(&inactive.negative)
            .all(|&v| v == 0.0));

        let same = triplet_loss_grads(&a, &p, &p, alpha()).unwrap();
        assert!(same.anchor.iter().all(|&v| v == 0.0));
        assert!(same.loss > 0.0);
    }

    #[test]
    fn kink_takes_zero_gradient() {
        // d(a,p) = 2, d(a,n) = 2, margin 0: argument exactly zero.
        let (a, p, n) = (e(&[1.0, 0.0]), e(&[0.0, 1.0]), e(&[0.0, -1.0]));
        let g = triplet_loss_grads(&a, &p, &n, Margin::new(0.0).unwrap()).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.anchor.iter().all(|&v| v == 0.0));
        let b = batch_triplet_loss(
            &[a, p, n],
            &[Triplet::new(0, 1, 2)],
            Margin::new(0.0).unwrap(),
        )
        .unwrap();
        assert_eq!(b.active, 0);
    }

    #[test]
    fn batch_examples() {
        let embs = vec![e(&[1.0, 0.0]), e(&[0.0, 1.0]), e(&[0.0, -1.0])];
        let empty = batch_triplet_loss(&embs, &[], alpha()).unwrap();
        assert_eq!((empty.total, empty.active), (0.0, 0));
        assert!(empty.grad.as_slice().iter().all(|&v| v == 0.0));

        let one = batch_triplet_loss(&embs, &[Triplet::new(0, 1, 2)], alpha()).unwrap();
        assert_eq!(one.active, 1);
        assert_eq!(one.grad.row(0), &[0.0, -4.0]);
        assert_eq!(one.grad.row(1), &[-2.0, 2.0]);
        assert_eq!(one.grad.row(2), &[2.0, 2.0]);

        assert!(matches!(
            batch_triplet_loss(&embs, &[Triplet::new(0, 1, 3)], alpha()),
            Err(Error::IndexOutOfRange { index: 3, batch: 3 })
        ));
    }

    #[test]
    fn batch_matches_per_triplet_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let embs: Vec<Embedding> = (0..12)
            .map(|_| {
                e(&(0..4)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>())
            })
            .collect();
        let triplets: Vec<Triplet> = (0..50)
            .map(|_| {
                Triplet::new(
                    rng.random_range(0..12),
                    rng.random_range(0..12),
                    rng.random_range(0..12),
                )
            })
            .collect();
        let m = Margin::new(0.5).unwrap();
        let batch = batch_triplet_loss(&embs, &triplets, m).unwrap();

        let mut total = 0.0;
        let mut grad = vec![vec![0.0; 4]; 12];
        for t in &triplets {
            let g = triplet_loss_grads(&embs[t.anchor], &embs[t.positive], &embs[t.negative], m)
                .unwrap();
            total += g.loss;
            #[allow(clippy::needless_range_loop)]
            for k in 0..4 {
                grad[t.anchor][k] += g.anchor[k];
                grad[t.positive][k] += g.positive[k];
                grad[t.negative][k] += g.negative[k];
            }
        }
        assert!((batch.total - total).abs() < 1e-10);
        for (i, row) in grad.iter().enumerate() {
            for (k, want) in row.iter().enumerate() {
                assert!((batch.grad.get(i, k) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn grads_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = alpha();
        let mut checked = 0;
        while checked < 200 {
            let v: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let arg = hinge_argument(&v[0..5], &v[5..10], &v[10..15], m);
            if arg < 1e-3 {
                continue;
            }
            checked += 1;
            let g = {
                let mut out = vec![0.0; 15];
                accumulate_grads(&v[0..5], &v[5..10], &v[10..15], m, |k, ga, gp, gn| {
                    out[k] = ga;
                    out[5 + k] = gp;
                    out[10 + k] = gn;
                });
                out
            };
            for k in 0..15 {
                let h = 1e-6;
                let mut up = v.clone();
                let mut down = v.clone();
                up[k] += h;
                down[k] -= h;
                let f = |w: &[f64]| hinge_argument(&w[0..5], &w[5..10], &w[10..15], m).max(0.0);
                let fd = (f(&up) - f(&down)) / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-4);
                assert!(rel < 1e-5);
            }
        }
    }
}
