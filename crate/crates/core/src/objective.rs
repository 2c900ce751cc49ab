//! Multi-ACCDOA targets and the permutation-invariant training losses.
//!
//! For a class-frame with `k` active events and `N_T` tracks, the candidate
//! targets are all surjective assignments of tracks onto events (events are
//! duplicated to fill the tracks), enumerated as lexicographically ordered
//! tuples `(e_0, .., e_{N_T-1})`. `k = 0` has the single all-zero candidate.
//! The loss picks, per class-frame, the candidate with the smallest
//! track-averaged squared error (first candidate on ties) and averages over
//! classes and frames.
//!
//! Vector threshold masking zeroes every predicted track vector shorter than
//! 0.5 before candidate selection. The mask is a constant of the graph; the
//! straight-through variant keeps the unmasked gradient instead.

use std::fmt::Write as _;
use std::path::Path;

use seld_tensor::{Graph, Scalar, Tensor, Var};

use crate::accdoa::{angles_from_doa, doa_from_angles, norm3, Layout, MultiAccdoa, DOA_DIM};
use crate::error::{CoreError, Result};

pub const LABEL_HEADER: &str = "frame_index,class_index,source_index,azimuth_deg,elevation_deg";
pub const VTM_THRESHOLD: f64 = 0.5;

/// One active event in one 100 ms label frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EventLabel {
    pub frame: usize,
    pub class: usize,
    pub source: usize,
    /// Unit DoA vector (x front, y left, z up).
    pub doa: [f64; 3],
}

impl EventLabel {
    pub fn from_angles(frame: usize, class: usize, source: usize, azimuth_deg: f64, elevation_deg: f64) -> Self {
        Self { frame, class, source, doa: doa_from_angles(azimuth_deg, elevation_deg) }
    }
}

/// Parse a label CSV. The header row and `#` comment lines are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<EventLabel>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("frame") {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(CoreError::Label(format!("line {}: expected 5 fields, got {}", i + 1, f.len())));
        }
        let bad = |what: &str| CoreError::Label(format!("line {}: bad {what}", i + 1));
        let frame = f[0].parse().map_err(|_| bad("frame_index"))?;
        let class = f[1].parse().map_err(|_| bad("class_index"))?;
        let source = f[2].parse().map_err(|_| bad("source_index"))?;
        let az: f64 = f[3].parse().map_err(|_| bad("azimuth_deg"))?;
        let el: f64 = f[4].parse().map_err(|_| bad("elevation_deg"))?;
        if !az.is_finite() || !(-90.0..=90.0).contains(&el) {
            return Err(bad("direction"));
        }
        out.push(EventLabel::from_angles(frame, class, source, az, el));
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<EventLabel>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_labels(&text)
}

pub fn format_labels(events: &[EventLabel]) -> String {
    let mut s = String::from(LABEL_HEADER);
    s.push('\n');
    for e in events {
        let (az, el) = angles_from_doa(e.doa);
        let _ = writeln!(s, "{},{},{},{:.4},{:.4}", e.frame, e.class, e.source, az, el);
    }
    s
}

pub fn write_labels(path: &Path, events: &[EventLabel]) -> Result<()> {
    std::fs::write(path, format_labels(events)).map_err(|e| CoreError::io(path, e))
}

/// All surjections from `n_tracks` tracks onto `k` events in lexicographic
/// order. `k = 0` yields one empty assignment.
pub fn surjections(n_tracks: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut cur = vec![0usize; n_tracks];
    fn rec(pos: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == cur.len() {
            if (0..k).all(|e| cur.contains(&e)) {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..k {
            cur[pos] = e;
            rec(pos + 1, k, cur, out);
        }
    }
    rec(0, k, &mut cur, &mut out);
    out
}

/// Active events per class-frame for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct AdpitTargets {
    pub layout: Layout,
    pub frames: usize,
    /// `events[t * n_classes + c]` lists the DoAs active at `(t, c)`.
    events: Vec<Vec<[f64; 3]>>,
}

impl AdpitTargets {
    pub fn empty(layout: Layout, frames: usize) -> Self {
        Self { layout, frames, events: vec![Vec::new(); frames * layout.n_classes] }
    }

    pub fn events(&self, t: usize, c: usize) -> &[[f64; 3]] {
        &self.events[t * self.layout.n_classes + c]
    }

    pub fn push(&mut self, t: usize, c: usize, doa: [f64; 3]) -> Result<()> {
        if t >= self.frames || c >= self.layout.n_classes {
            return Err(CoreError::Label(format!("event at frame {t}, class {c} outside {}x{}", self.frames, self.layout.n_classes)));
        }
        let slot = &mut self.events[t * self.layout.n_classes + c];
        if slot.len() == self.layout.n_tracks {
            return Err(CoreError::Label(format!(
                "frame {t}, class {c}: more than {} simultaneous events",
                self.layout.n_tracks
            )));
        }
        slot.push(doa);
        Ok(())
    }

    pub fn clear(&mut self, t: usize) {
        for c in 0..self.layout.n_classes {
            self.events[t * self.layout.n_classes + c].clear();
        }
    }

    /// Candidate target tuples for `(t, c)`: each is `N_T` vectors.
    pub fn candidates(&self, t: usize, c: usize) -> Vec<Vec<[f64; 3]>> {
        let ev = self.events(t, c);
        let n = self.layout.n_tracks;
        if ev.is_empty() {
            return vec![vec![[0.0; 3]; n]];
        }
        surjections(n, ev.len()).into_iter().map(|a| a.into_iter().map(|e| ev[e]).collect()).collect()
    }

    /// Circularly shift frames: frame `t` moves to `(t + shift) mod T`.
    pub fn roll(&self, shift: isize) -> Self {
        let t = self.frames as isize;
        let mut out = Self::empty(self.layout, self.frames);
        for ti in 0..self.frames {
            let dst = (ti as isize + shift).rem_euclid(t) as usize;
            for c in 0..self.layout.n_classes {
                out.events[dst * self.layout.n_classes + c] = self.events(ti, c).to_vec();
            }
        }
        out
    }

    /// Apply a linear map to every DoA.
    pub fn map_doas(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let mut out = self.clone();
        out.events.iter_mut().flatten().for_each(|d| *d = f(*d));
        out
    }

    /// Number of active `(t, c)` cells.
    pub fn active_cells(&self) -> usize {
        self.events.iter().filter(|e| !e.is_empty()).count()
    }

    /// Reference events in label form.
    pub fn to_labels(&self) -> Vec<EventLabel> {
        let mut out = Vec::new();
        for t in 0..self.frames {
            for c in 0..self.layout.n_classes {
                for (s, &d) in self.events(t, c).iter().enumerate() {
                    out.push(EventLabel { frame: t, class: c, source: s, doa: d });
                }
            }
        }
        out
    }
}

/// Group labels into per-class-frame target sets.
pub fn assemble_adpit_targets(labels: &[EventLabel], layout: Layout, frames: usize) -> Result<AdpitTargets> {
    let mut t = AdpitTargets::empty(layout, frames);
    for l in labels {
        let n = norm3(l.doa);
        if (n - 1.0).abs() > 1e-6 {
            return Err(CoreError::Label(format!("frame {}: DoA norm {n} is not 1", l.frame)));
        }
        t.push(l.frame, l.class, l.doa)?;
    }
    Ok(t)
}

/// Per class-frame chosen candidate indices, `[B][T * N_cls]`.
pub type Selection = Vec<Vec<usize>>;

fn check_pred(shape: &[usize], targets: &[AdpitTargets]) -> Result<(usize, usize, Layout)> {
    let first = targets.first().ok_or_else(|| CoreError::EmptyInput("no targets".into()))?;
    let layout = first.layout;
    let (b, t, w) = match *shape {
        [t, w] => (1, t, w),
        [b, t, w] => (b, t, w),
        _ => return Err(CoreError::Data(format!("prediction shape {shape:?} is not [B, T, W]"))),
    };
    if w != layout.width() || b != targets.len() || targets.iter().any(|x| x.frames != t || x.layout != layout) {
        return Err(CoreError::Data(format!(
            "prediction shape {shape:?} does not match {} target clips of {} frames x width {}",
            targets.len(),
            first.frames,
            layout.width()
        )));
    }
    Ok((b, t, layout))
}

/// Choose the best candidate per class-frame from prediction values and
/// return the full target array plus the selection.
fn select<S: Scalar>(pred: &[S], targets: &[AdpitTargets], t: usize, layout: Layout) -> (Vec<S>, Selection) {
    let w = layout.width();
    let mut tgt = vec![S::zero(); pred.len()];
    let mut sel = Vec::with_capacity(targets.len());
    for (bi, tg) in targets.iter().enumerate() {
        let mut s = Vec::with_capacity(t * layout.n_classes);
        for ti in 0..t {
            let base = (bi * t + ti) * w;
            for c in 0..layout.n_classes {
                let cands = tg.candidates(ti, c);
                let off = base + layout.index(c, 0, 0);
                let span = layout.n_tracks * DOA_DIM;
                let p = &pred[off..off + span];
                let mut best = (0usize, f64::INFINITY);
                for (ci, cand) in cands.iter().enumerate() {
                    let mut e = 0.0;
                    for (n, v) in cand.iter().enumerate() {
                        for d in 0..DOA_DIM {
                            let diff = p[n * DOA_DIM + d].as_f64() - v[d];
                            e += diff * diff;
                        }
                    }
                    if e < best.1 {
                        best = (ci, e);
                    }
                }
                for (n, v) in cands[best.0].iter().enumerate() {
                    for d in 0..DOA_DIM {
                        tgt[off + n * DOA_DIM + d] = S::lit(v[d]);
                    }
                }
                s.push(best.0);
            }
        }
        sel.push(s);
    }
    (tgt, sel)
}

fn mse_against<S: Scalar>(g: &mut Graph<S>, pred: Var, target: Vec<S>, denom: usize) -> Result<Var> {
    let tv = g.constant(Tensor::new(g.shape(pred).to_vec(), target)?)?;
    let diff = g.sub(pred, tv)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, S::lit(1.0 / denom as f64))?)
}

/// ADPIT loss of predictions `[B, T, W]` (or `[T, W]` for one clip).
pub fn adpit_loss<S: Scalar>(g: &mut Graph<S>, pred: Var, targets: &[AdpitTargets]) -> Result<(Var, Selection)> {
    let (b, t, layout) = check_pred(g.shape(pred), targets)?;
    let (tgt, sel) = select(g.value(pred).data(), targets, t, layout);
    let loss = mse_against(g, pred, tgt, b * t * layout.n_classes * layout.n_tracks)?;
    Ok((loss, sel))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VtmGradient {
    /// Masked entries receive zero gradient.
    #[default]
    Hard,
    /// Gradient of the unmasked prediction passes through the mask.
    StraightThrough,
}

/// Per-track keep mask (`1` if the vector length is at least 0.5) expanded to
/// every component.
pub fn vtm_mask<S: Scalar>(pred: &[S]) -> Vec<S> {
    let mut m = vec![S::zero(); pred.len()];
    for (chunk, mc) in pred.chunks_exact(DOA_DIM).zip(m.chunks_exact_mut(DOA_DIM)) {
        let len = chunk.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let keep = if len < VTM_THRESHOLD { S::zero() } else { S::one() };
        mc.iter_mut().for_each(|x| *x = keep);
    }
    m
}

/// Masked prediction node; its value is the thresholded prediction.
pub fn vtm_apply<S: Scalar>(g: &mut Graph<S>, pred: Var, grad: VtmGradient) -> Result<Var> {
    let p = g.value(pred).clone();
    let mask = vtm_mask(p.data());
    match grad {
        VtmGradient::Hard => {
            let m = g.constant(Tensor::new(p.shape().to_vec(), mask)?)?;
            Ok(g.mul(pred, m)?)
        }
        VtmGradient::StraightThrough => {
            let delta: Vec<S> = p.data().iter().zip(&mask).map(|(&v, &m)| v * m - v).collect();
            let d = g.constant(Tensor::new(p.shape().to_vec(), delta)?)?;
            Ok(g.add(pred, d)?)
        }
    }
}

/// VTM finetuning loss: threshold masking inside the per-candidate error,
/// then the ADPIT minimum.
pub fn vtm_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    targets: &[AdpitTargets],
    grad: VtmGradient,
) -> Result<(Var, Selection)> {
    let masked = vtm_apply(g, pred, grad)?;
    adpit_loss(g, masked, targets)
}

/// Value-only ADPIT loss for one clip.
pub fn adpit_loss_value(pred: &MultiAccdoa, targets: &AdpitTargets) -> Result<f64> {
    let mut g = Graph::<f64>::new(seld_tensor::Mode::Eval);
    let p = g.constant(pred.to_tensor())?;
    let (l, _) = adpit_loss(&mut g, p, std::slice::from_ref(targets))?;
    Ok(g.value(l).item())
}

pub fn vtm_loss_value(pred: &MultiAccdoa, targets: &AdpitTargets) -> Result<f64> {
    let mut g = Graph::<f64>::new(seld_tensor::Mode::Eval);
    let p = g.constant(pred.to_tensor())?;
    let (l, _) = vtm_loss(&mut g, p, std::slice::from_ref(targets), VtmGradient::Hard)?;
    Ok(g.value(l).item())
}

/// Count active ground-truth cells whose best-matching predicted track is
/// shorter than 0.5 (missed detections under threshold decoding).
pub fn count_short_active(pred: &MultiAccdoa, targets: &AdpitTargets) -> usize {
    let layout = pred.layout;
    let mut count = 0;
    for t in 0..targets.frames.min(pred.frames) {
        for c in 0..layout.n_classes {
            let cands = targets.candidates(t, c);
            if targets.events(t, c).is_empty() {
                continue;
            }
            let mut best = (0usize, f64::INFINITY);
            for (ci, cand) in cands.iter().enumerate() {
                let e: f64 = cand
                    .iter()
                    .enumerate()
                    .map(|(n, v)| {
                        let p = pred.vector(t, c, n);
                        (0..3).map(|d| (p[d] - v[d]).powi(2)).sum::<f64>()
                    })
                    .sum();
                if e < best.1 {
                    best = (ci, e);
                }
            }
            for (n, v) in cands[best.0].iter().enumerate() {
                if norm3(*v) > 0.0 && norm3(pred.vector(t, c, n)) < VTM_THRESHOLD {
                    count += 1;
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_counts() {
        let counts: Vec<usize> = (0..=3).map(|k| surjections(3, k).len()).collect();
        assert_eq!(counts, vec![1, 1, 6, 6]);
        assert_eq!(surjections(3, 2)[0], vec![0, 0, 1]);
        assert!(surjections(3, 4).is_empty());
    }

    #[test]
    fn too_many_events_is_a_label_error() {
        let layout = Layout::new(1, 3);
        let labels: Vec<EventLabel> = (0..4).map(|s| EventLabel::from_angles(0, 0, s, 90.0 * s as f64, 0.0)).collect();
        assert!(matches!(assemble_adpit_targets(&labels, layout, 1), Err(CoreError::Label(_))));
    }

    #[test]
    fn single_event_duplicated_on_all_tracks() {
        let layout = Layout::new(1, 3);
        let mut tg = AdpitTargets::empty(layout, 1);
        tg.push(0, 0, [1.0, 0.0, 0.0]).unwrap();
        let mut pred = MultiAccdoa::zeros(layout, 1);
        pred.set_vector(0, 0, 2, [1.0, 0.0, 0.0]);
        let l = adpit_loss_value(&pred, &tg).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn vtm_masks_short_vectors() {
        let layout = Layout::new(1, 3);
        let mut tg = AdpitTargets::empty(layout, 1);
        tg.push(0, 0, [0.0, 1.0, 0.0]).unwrap();
        let mut pred = MultiAccdoa::zeros(layout, 1);
        for n in 0..3 {
            pred.set_vector(0, 0, n, [0.0, 0.3, 0.0]);
        }
        // every track masked to zero against a unit target
        assert!((vtm_loss_value(&pred, &tg).unwrap() - 1.0).abs() < 1e-15);
        assert!(adpit_loss_value(&pred, &tg).unwrap() < 1.0);
    }

    #[test]
    fn csv_roundtrip() {
        let ev = vec![EventLabel::from_angles(3, 1, 0, 45.0, -10.0), EventLabel::from_angles(4, 0, 1, -120.0, 30.0)];
        let back = parse_labels(&format_labels(&ev)).unwrap();
        for (a, b) in ev.iter().zip(&back) {
            assert_eq!((a.frame, a.class, a.source), (b.frame, b.class, b.source));
            assert!((0..3).all(|d| (a.doa[d] - b.doa[d]).abs() < 1e-6));
        }
        assert!(parse_labels("frame_index,x\n1,2,3").is_err());
    }
}
