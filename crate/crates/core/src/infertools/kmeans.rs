use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 3, max_iter: 500, n_init: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if r < di {
                    pick = i;
                    break;
                }
                r -= di;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let (mut best, mut bd) = (0, f64::INFINITY);
        for (j, c) in centers.iter().enumerate() {
            let d = dist2(p, c);
            if d < bd {
                best = j;
                bd = d;
            }
        }
        *l = best;
        inertia += bd;
    }
    inertia
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> KMeansResult {
    let k = centers.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut inertia = assign(points, &centers, &mut labels);
    history.push(inertia);
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // re-seed empty clusters with the point farthest from its own center
        for j in 0..k {
            if counts[j] == 0 {
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, dist2(p, &centers[labels[i]])))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
                counts[labels[far]] -= 1;
                centers[j] = points[far].clone();
                labels[far] = j;
                counts[j] = 1;
            }
        }
        let prev = labels.clone();
        inertia = assign(points, &centers, &mut labels);
        history.push(inertia);
        if labels == prev {
            break;
        }
    }
    KMeansResult { centers, labels, inertia, history, iterations }
}

/// Seeded k-means with k-means++ initialization.
pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if points.is_empty() || cfg.k == 0 {
        return Err(CoreError::EmptyInput("k-means needs points and k > 0".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(CoreError::Data("k-means points differ in dimension".into()));
    }
    let k = cfg.k.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.n_init.max(1) {
        let init = plus_plus_init(points, k, &mut rng);
        let r = lloyd(points, init, cfg.max_iter);
        if best.as_ref().map_or(true, |b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_blobs_and_inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        for c in [[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]] {
            for _ in 0..20 {
                pts.push(vec![c[0] + rng.gen_range(-0.5..0.5), c[1] + rng.gen_range(-0.5..0.5)]);
            }
        }
        let r = kmeans(&pts, &KMeansConfig { k: 3, max_iter: 500, n_init: 3, seed: 1 }).unwrap();
        assert!(r.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for blob in 0..3 {
            let l = r.labels[blob * 20];
            assert!(r.labels[blob * 20..(blob + 1) * 20].iter().all(|&x| x == l));
        }
        let again = kmeans(&pts, &KMeansConfig { k: 3, max_iter: 500, n_init: 3, seed: 1 }).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn degenerate_identical_points() {
        let pts = vec![vec![1.0, 2.0]; 6];
        let r = kmeans(&pts, &KMeansConfig { k: 3, ..Default::default() }).unwrap();
        assert!(r.centers.iter().all(|c| c == &vec![1.0, 2.0]));
        assert_eq!(r.inertia, 0.0);
    }
}
