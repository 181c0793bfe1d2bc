//! Nearest-mean initialisation of the vision clustering head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::synth::PairedInstance;
use crate::tensor::Tensor;

use super::{derived_rng, JointModel, Result, Stream, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned center.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centers.iter().enumerate() {
        let d = sq_dist(mu, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from a k-means++ seeding; best of `restarts` by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, iters: usize, rng: &mut impl Rng) -> KMeans {
    assert!(k > 0 && points.len() >= k, "need at least k points");
    let dim = points[0].len();
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
        let mut d2: Vec<f64> = points.iter().map(|x| sq_dist(x, &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                let mut i = 0;
                while i + 1 < d2.len() && r >= d2[i] {
                    r -= d2[i];
                    i += 1;
                }
                i
            } else {
                rng.random_range(0..points.len())
            };
            centers.push(points[pick].clone());
            for (x, d) in points.iter().zip(d2.iter_mut()) {
                *d = d.min(sq_dist(x, &centers[centers.len() - 1]));
            }
        }
        let mut assignment = vec![0; points.len()];
        for _ in 0..iters {
            let mut changed = false;
            for (a, x) in assignment.iter_mut().zip(points) {
                let c = nearest(&centers, x).0;
                changed |= *a != c;
                *a = c;
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (&a, x) in assignment.iter().zip(points) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(x) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            if !changed {
                break;
            }
        }
        let inertia = points
            .iter()
            .zip(&assignment)
            .map(|(x, &a)| sq_dist(x, &centers[a]))
            .sum();
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeans {
                centers,
                assignment,
                inertia,
            });
        }
    }
    best.unwrap()
}

/// What the warm start fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub centers: Vec<Vec<f64>>,
    /// Inverse of the pooled per-dimension variance.
    pub precision: f64,
    pub inertia: f64,
}

impl WarmStart {
    /// Clusters the perception features of every training part and sets the
    /// terminal net and `u_term` so that `s(T, v) = τ(μ_T · ψ(v) − |μ_T|²/2)`.
    pub fn apply(model: &mut JointModel, train: &[PairedInstance], seed: u64) -> Result<Self> {
        let spec = model.vis.spec().clone();
        let k = spec.n_preterminals;
        let ft = model.vis.terminal_net().clone();
        if ft.layers().len() != 1 {
            return Err(TrainError::Config("warm start needs a single-layer vision terminal net".into()));
        }
        let parts: Vec<Vec<f64>> = train.iter().flat_map(|x| x.parts.iter().cloned()).collect();
        if parts.len() < k {
            return Err(TrainError::Data(format!("warm start needs at least {k} parts")));
        }
        let feats = model.features(&parts)?;
        let (m, f) = feats.dims2().expect("2-D features");
        let d = ft.output_dim();
        if d < f + 1 {
            return Err(TrainError::Config(format!(
                "warm start needs vis.symbol_dim >= {} (feature dim + 1), got {d}",
                f + 1
            )));
        }
        let points: Vec<Vec<f64>> = (0..m).map(|i| feats.row(i).to_vec()).collect();
        let mut rng = derived_rng(seed, Stream::WarmStart, 0, 0);
        let km = kmeans(&points, k, 4, 100, &mut rng);
        let var = (km.inertia / (m * f) as f64).max(1e-6);
        let tau = 1.0 / var;

        let (w, b) = ft.layers()[0];
        let mut wt = Tensor::zeros(&[f, d]);
        for i in 0..f {
            wt.data_mut()[i * d + i] = 1.0;
        }
        let mut bt = Tensor::zeros(&[d]);
        bt.data_mut()[f] = 1.0;
        let mut ut = Tensor::zeros(&[d, k]);
        for (t, mu) in km.centers.iter().enumerate() {
            for i in 0..f {
                ut.data_mut()[i * k + t] = tau * mu[i];
            }
            ut.data_mut()[f * k + t] = -0.5 * tau * mu.iter().map(|x| x * x).sum::<f64>();
        }
        *model.store.get_mut(w) = wt;
        *model.store.get_mut(b) = bt;
        *model.store.get_mut(model.vis.u_term()) = ut;
        Ok(WarmStart {
            centers: km.centers,
            precision: tau,
            inertia: km.inertia,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_well_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut pts = Vec::new();
        let mut gold = Vec::new();
        for i in 0..90 {
            let c = centers[i % 3];
            pts.push(vec![c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-1.0..1.0)]);
            gold.push(i % 3);
        }
        let km = kmeans(&pts, 3, 3, 50, &mut rng);
        let acc = crate::eval::clustering_accuracy(&km.assignment, &gold, 3).unwrap();
        assert_eq!(acc, 1.0);
        // brute-force inertia of the recovered partition
        let direct: f64 = pts
            .iter()
            .zip(&km.assignment)
            .map(|(x, &a)| sq_dist(x, &km.centers[a]))
            .sum();
        assert!((direct - km.inertia).abs() < 1e-9);
    }

    #[test]
    fn single_cluster_center_is_the_mean() {
        let pts = vec![vec![1.0], vec![2.0], vec![6.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let km = kmeans(&pts, 1, 1, 10, &mut rng);
        assert!((km.centers[0][0] - 3.0).abs() < 1e-12);
        assert!((km.inertia - 14.0).abs() < 1e-12);
    }
}
