use super::kmeans::{kmeans, KMeansConfig};
use crate::accdoa::MultiAccdoa;
use crate::error::{CoreError, Result};
use crate::hungarian;

#[derive(Clone, Debug, PartialEq)]
pub struct CtaiConfig {
    /// Rotated outputs whose mean-per-element MSE against the original, after
    /// matching tracks per class, is at or above this value are discarded.
    pub mse_threshold: f64,
    pub kmeans_max_iter: usize,
    pub kmeans_n_init: usize,
    pub seed: u64,
}

impl Default for CtaiConfig {
    fn default() -> Self {
        Self { mse_threshold: 1e-3, kmeans_max_iter: 500, kmeans_n_init: 4, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CtaiOutput {
    pub output: MultiAccdoa,
    /// Indices into the rotated set that survived outlier rejection.
    pub survivors: Vec<usize>,
}

fn trajectory(m: &MultiAccdoa, c: usize, n: usize) -> Vec<f64> {
    (0..m.frames).flat_map(|t| m.vector(t, c, n)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean-per-element squared error after the per-class track permutation
/// that best aligns `b` to `a`. Track order carries no meaning, so a
/// rotation that only reorders tracks is not an outlier.
pub fn matched_mse(a: &MultiAccdoa, b: &MultiAccdoa) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "mse on mismatched outputs");
    let nt = a.layout.n_tracks;
    let mut total = 0.0;
    for c in 0..a.layout.n_classes {
        let ta: Vec<Vec<f64>> = (0..nt).map(|n| trajectory(a, c, n)).collect();
        let tb: Vec<Vec<f64>> = (0..nt).map(|n| trajectory(b, c, n)).collect();
        let cost: Vec<f64> = ta.iter().flat_map(|x| tb.iter().map(move |y| sq_dist(x, y))).collect();
        total += hungarian::assign(&cost, nt, nt).iter().map(|&(i, j)| cost[i * nt + j]).sum::<f64>();
    }
    total / a.data.len() as f64
}

/// Fuse the original output with already re-rotated augmented outputs.
///
/// Per class, every surviving output contributes its `N_T` track
/// trajectories (length `T * 3`); k-means with `K = N_T` clusters them and
/// the centers, matched to the original tracks by minimum squared distance,
/// become the output tracks.
pub fn ctai(original: &MultiAccdoa, rotated: &[MultiAccdoa], cfg: &CtaiConfig) -> Result<CtaiOutput> {
    if !(cfg.mse_threshold > 0.0) {
        return Err(CoreError::Config("CTAI threshold must be positive".into()));
    }
    for r in rotated {
        if r.layout != original.layout || r.frames != original.frames {
            return Err(CoreError::Data("rotated output geometry differs from the original".into()));
        }
    }
    let survivors: Vec<usize> =
        rotated.iter().enumerate().filter(|(_, r)| matched_mse(original, r) < cfg.mse_threshold).map(|(i, _)| i).collect();
    if survivors.is_empty() {
        return Ok(CtaiOutput { output: original.clone(), survivors });
    }
    let members: Vec<&MultiAccdoa> = std::iter::once(original).chain(survivors.iter().map(|&i| &rotated[i])).collect();
    let layout = original.layout;
    let (nt, frames) = (layout.n_tracks, original.frames);
    let mut out = original.clone();
    for c in 0..layout.n_classes {
        let points: Vec<Vec<f64>> = members.iter().flat_map(|m| (0..nt).map(move |n| trajectory(m, c, n))).collect();
        let km = kmeans(
            &points,
            &KMeansConfig {
                k: nt,
                max_iter: cfg.kmeans_max_iter,
                n_init: cfg.kmeans_n_init,
                seed: cfg.seed.wrapping_add(c as u64),
            },
        )?;
        let orig: Vec<&Vec<f64>> = points[..nt].iter().collect();
        let k = km.centers.len();
        let cost: Vec<f64> = orig
            .iter()
            .flat_map(|o| km.centers.iter().map(move |ctr| sq_dist(o, ctr)))
            .collect();
        for (n, j) in hungarian::assign(&cost, nt, k) {
            let ctr = &km.centers[j];
            for t in 0..frames {
                out.set_vector(t, c, n, [ctr[t * 3], ctr[t * 3 + 1], ctr[t * 3 + 2]]);
            }
        }
    }
    Ok(CtaiOutput { output: out, survivors })
}
