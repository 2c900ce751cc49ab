use seld_tensor::Scalar;

use super::network::AttentionMapBundle;
use crate::error::{CoreError, Result};

/// Channel-attention map of the last CST block, maximized over heads and
/// laid out as rows `(C_k, F'/P_F)` by columns `(B, T'/P_T, C_q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReshapedAttention {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `[rows, cols]`.
    pub data: Vec<f64>,
    /// Time-patch index `b * T'/P_T + g_t` of every column.
    pub col_time: Vec<usize>,
}

impl ReshapedAttention {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

pub fn export_channel_attention<S: Scalar>(bundle: &AttentionMapBundle<S>) -> Result<ReshapedAttention> {
    let (last, blk) = bundle
        .blocks
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, b)| b.channel.as_ref().map(|c| (c, i)))
        .ok_or_else(|| CoreError::Data("no channel-attention maps captured".into()))?;
    let (pt, pf) = bundle.kernels[blk];
    let (gt, gf) = (bundle.encoded.0 / pt, bundle.encoded.1 / pf);
    let c = bundle.channels;
    let h = bundle.heads;
    let b = bundle.batch;
    if last.shape() != [b * gt * gf, h, c, c] {
        return Err(CoreError::Data(format!("channel-attention shape {:?} inconsistent with geometry", last.shape())));
    }
    let rows = c * gf;
    let cols = b * gt * c;
    let mut data = vec![f64::NEG_INFINITY; rows * cols];
    let a = last.data();
    for n in 0..b * gt * gf {
        let (bt, fi) = (n / gf, n % gf);
        for hi in 0..h {
            for cq in 0..c {
                for ck in 0..c {
                    let v = a[((n * h + hi) * c + cq) * c + ck].as_f64();
                    let idx = (ck * gf + fi) * cols + bt * c + cq;
                    if v > data[idx] {
                        data[idx] = v;
                    }
                }
            }
        }
    }
    let col_time = (0..cols).map(|j| j / c).collect();
    Ok(ReshapedAttention { rows, cols, data, col_time })
}

/// Cosine similarity between all column pairs, `[cols, cols]` row-major.
pub fn column_cosine_similarity(m: &ReshapedAttention) -> Vec<f64> {
    let n = m.cols;
    let cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m.rows).map(|r| m.at(r, j)).collect()).collect();
    let norms: Vec<f64> = cols.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let d: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            let s = d / (norms[i] * norms[j]).max(f64::MIN_POSITIVE);
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    out
}

/// Mean similarity of column pairs with equal and with different labels,
/// excluding the diagonal.
pub fn within_cross_similarity(sim: &[f64], labels: &[usize]) -> (f64, f64) {
    let n = labels.len();
    let (mut w, mut nw, mut x, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                w += sim[i * n + j];
                nw += 1;
            } else {
                x += sim[i * n + j];
                nx += 1;
            }
        }
    }
    (w / nw.max(1) as f64, x / nx.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_columns_have_unit_similarity() {
        let m = ReshapedAttention { rows: 2, cols: 3, data: vec![1.0, 1.0, 0.0, 2.0, 2.0, 1.0], col_time: vec![0, 1, 2] };
        let s = column_cosine_similarity(&m);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!((s[2] - s[6]).abs() == 0.0);
        for i in 0..3 {
            assert_eq!(s[i * 3 + i], 1.0);
        }
    }
}
