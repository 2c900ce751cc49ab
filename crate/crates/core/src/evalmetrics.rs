//! Frame-level SELD scoring.
//!
//! Predictions and references are matched per class and 100 ms frame by a
//! minimum-total-angle assignment. A matched pair within 20° is a true
//! positive; a pair beyond it counts as one false positive and one false
//! negative, but still counts towards localization error and recall.
//! The error rate is micro-averaged; F1, LE and LR are macro-averaged over
//! classes that have at least one reference.

use std::collections::BTreeMap;
use std::fmt;

use crate::accdoa::angle_deg;
use crate::error::{CoreError, Result};
use crate::hungarian;
use crate::objective::EventLabel;

pub const ANGLE_THRESHOLD_DEG: f64 = 20.0;
/// LE assigned to a class without any matched pair.
pub const MAX_LE_DEG: f64 = 180.0;

/// Outcome of matching one class in one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatch {
    /// `(prediction, reference, angle_deg)` for every assigned pair.
    pub pairs: Vec<(usize, usize, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn match_frame(preds: &[[f64; 3]], refs: &[[f64; 3]]) -> FrameMatch {
    let cost: Vec<f64> = preds.iter().flat_map(|p| refs.iter().map(move |r| angle_deg(*p, *r))).collect();
    let pairs: Vec<(usize, usize, f64)> = hungarian::assign(&cost, preds.len(), refs.len())
        .into_iter()
        .map(|(p, r)| (p, r, cost[p * refs.len() + r]))
        .collect();
    let tp = pairs.iter().filter(|(_, _, a)| *a <= ANGLE_THRESHOLD_DEG).count();
    FrameMatch { pairs, tp, fp: preds.len() - tp, fn_: refs.len() - tp }
}

/// Accumulated counts for one class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub refs: usize,
    pub matched: usize,
    pub angle_sum: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl ClassCounts {
    fn add_frame(&mut self, m: &FrameMatch, n_refs: usize) {
        self.tp += m.tp;
        self.fp += m.fp;
        self.fn_ += m.fn_;
        self.refs += n_refs;
        self.matched += m.pairs.len();
        self.angle_sum += m.pairs.iter().map(|p| p.2).sum::<f64>();
        self.substitutions += m.fn_.min(m.fp);
        self.deletions += m.fn_.saturating_sub(m.fp);
        self.insertions += m.fp.saturating_sub(m.fn_);
    }

    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 { 1.0 } else { 2.0 * self.tp as f64 / d as f64 }
    }

    pub fn le(&self) -> f64 {
        if self.matched == 0 { MAX_LE_DEG } else { self.angle_sum / self.matched as f64 }
    }

    pub fn lr(&self) -> f64 {
        if self.refs == 0 { 0.0 } else { self.matched as f64 / self.refs as f64 }
    }

    pub fn er(&self) -> f64 {
        if self.refs == 0 { 0.0 } else { (self.substitutions + self.deletions + self.insertions) as f64 / self.refs as f64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub counts: ClassCounts,
    pub f1: f64,
    pub le: f64,
    pub lr: f64,
    pub er: f64,
    pub seld: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub er20: f64,
    pub f1_20: f64,
    pub le_cd: f64,
    pub lr_cd: f64,
    pub seld_score: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// `(ER + (1 - F1) + LE/180 + (1 - LR)) / 4`.
pub fn seld_score(er: f64, f1: f64, le_deg: f64, lr: f64) -> Result<f64> {
    let ok = er.is_finite()
        && er >= 0.0
        && (0.0..=1.0).contains(&f1)
        && (0.0..=MAX_LE_DEG).contains(&le_deg)
        && (0.0..=1.0).contains(&lr);
    if !ok {
        return Err(CoreError::Data(format!("metrics out of range: er={er} f1={f1} le={le_deg} lr={lr}")));
    }
    Ok((er + (1.0 - f1) + le_deg / MAX_LE_DEG + (1.0 - lr)) / 4.0)
}

/// Score predicted against reference events for `n_classes` classes.
pub fn compute_metrics(preds: &[EventLabel], refs: &[EventLabel], n_classes: usize) -> Result<MetricReport> {
    if refs.is_empty() {
        return Err(CoreError::Undefined("reference set is empty".into()));
    }
    for e in preds.iter().chain(refs) {
        if e.class >= n_classes {
            return Err(CoreError::Label(format!("class {} out of range for {n_classes} classes", e.class)));
        }
    }
    type Cell = (Vec<[f64; 3]>, Vec<[f64; 3]>);
    let mut cells: BTreeMap<(usize, usize), Cell> = BTreeMap::new();
    for p in preds {
        cells.entry((p.frame, p.class)).or_default().0.push(p.doa);
    }
    for r in refs {
        cells.entry((r.frame, r.class)).or_default().1.push(r.doa);
    }
    let mut per_class = vec![ClassCounts::default(); n_classes];
    // frame -> (fn, fp) summed over classes
    let mut frame_totals: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&(frame, class), (p, r)) in &cells {
        let m = match_frame(p, r);
        per_class[class].add_frame(&m, r.len());
        let e = frame_totals.entry(frame).or_default();
        e.0 += m.fn_;
        e.1 += m.fp;
    }
    let errors: usize = frame_totals.values().map(|&(fn_, fp)| fn_.max(fp)).sum();
    let er20 = errors as f64 / refs.len() as f64;

    let mut classes = Vec::with_capacity(n_classes);
    for (class, counts) in per_class.into_iter().enumerate() {
        let (f1, le, lr, er) = (counts.f1(), counts.le(), counts.lr(), counts.er());
        let seld = seld_score(er, f1, le, lr)?;
        classes.push(ClassMetrics { class, counts, f1, le, lr, er, seld });
    }
    let scored: Vec<&ClassMetrics> = classes.iter().filter(|c| c.counts.refs > 0).collect();
    let n = scored.len() as f64;
    let f1_20 = scored.iter().map(|c| c.f1).sum::<f64>() / n;
    let le_cd = scored.iter().map(|c| c.le).sum::<f64>() / n;
    let lr_cd = scored.iter().map(|c| c.lr).sum::<f64>() / n;
    let seld = seld_score(er20, f1_20, le_cd, lr_cd)?;
    Ok(MetricReport { er20, f1_20, le_cd, lr_cd, seld_score: seld, per_class: classes })
}

pub const METRICS_CSV_HEADER: &str = "scope,er20,f1_20,le_cd,lr_cd,seld_score";

impl MetricReport {
    /// Overall row followed by one row per class with references.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_CSV_HEADER}\n");
        s.push_str(&format!(
            "overall,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.er20, self.f1_20, self.le_cd, self.lr_cd, self.seld_score
        ));
        for c in self.per_class.iter().filter(|c| c.counts.refs > 0) {
            s.push_str(&format!("class_{},{:.6},{:.6},{:.6},{:.6},{:.6}\n", c.class, c.er, c.f1, c.le, c.lr, c.seld));
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ER(20)     {:.4}", self.er20)?;
        writeln!(f, "F1(20)     {:.4}", self.f1_20)?;
        writeln!(f, "LE_CD      {:.2} deg", self.le_cd)?;
        writeln!(f, "LR_CD      {:.4}", self.lr_cd)?;
        writeln!(f, "SELD score {:.4}", self.seld_score)?;
        for c in self.per_class.iter().filter(|c| c.counts.refs > 0) {
            writeln!(
                f,
                "  class {:>2}: F1 {:.4}  LE {:.2}  LR {:.4}  S {:.4}  (tp {} fp {} fn {} refs {})",
                c.class, c.f1, c.le, c.lr, c.seld, c.counts.tp, c.counts.fp, c.counts.fn_, c.counts.refs
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(frame: usize, class: usize, az: f64) -> EventLabel {
        EventLabel::from_angles(frame, class, 0, az, 0.0)
    }

    #[test]
    fn threshold_rule() {
        let m = match_frame(&[ev(0, 0, 10.0).doa], &[ev(0, 0, 0.0).doa]);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        assert!((m.pairs[0].2 - 10.0).abs() < 1e-9);
        let m = match_frame(&[ev(0, 0, 30.0).doa], &[ev(0, 0, 0.0).doa]);
        assert_eq!((m.tp, m.fp, m.fn_, m.pairs.len()), (0, 1, 1, 1));
    }

    #[test]
    fn crossing_assignment() {
        let refs = [ev(0, 0, 0.0).doa, ev(0, 0, 90.0).doa];
        let preds = [ev(0, 0, 85.0).doa, ev(0, 0, 5.0).doa];
        let m = match_frame(&preds, &refs);
        let mut p: Vec<(usize, usize)> = m.pairs.iter().map(|x| (x.0, x.1)).collect();
        p.sort_unstable();
        assert_eq!(p, vec![(0, 1), (1, 0)]);
        assert_eq!(m.tp, 2);
    }

    #[test]
    fn limits() {
        let refs = vec![ev(0, 0, 0.0), ev(1, 1, 40.0), ev(2, 0, -30.0)];
        let r = compute_metrics(&refs, &refs, 2).unwrap();
        assert_eq!((r.er20, r.f1_20, r.le_cd, r.lr_cd, r.seld_score), (0.0, 1.0, 0.0, 1.0, 0.0));
        let r = compute_metrics(&[], &refs, 2).unwrap();
        assert_eq!((r.er20, r.f1_20, r.le_cd, r.lr_cd), (1.0, 0.0, 180.0, 0.0));
        assert!(matches!(compute_metrics(&refs, &[], 2), Err(CoreError::Undefined(_))));
    }

    #[test]
    fn composite_score() {
        assert!((seld_score(0.41, 0.577, 13.8, 0.683).unwrap() - 0.3067).abs() <= 5e-4);
        assert_eq!(seld_score(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(seld_score(0.1, 1.2, 0.0, 1.0).is_err());
    }
}
