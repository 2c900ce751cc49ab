//! Multi-ACCDOA to discrete detections.
//!
//! Per class-frame, tracks whose pairwise angle is at most 15° are merged by
//! transitive closure; each group becomes one candidate whose DoA is the
//! normalized mean vector and whose activity is the mean track length.
//! Candidates with activity strictly above 0.5 are kept.

use crate::accdoa::{angle_deg, norm3, MultiAccdoa};
use crate::objective::EventLabel;

pub const UNIFY_ANGLE_DEG: f64 = 15.0;
pub const ACTIVITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Unit DoA.
    pub doa: [f64; 3],
    pub activity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedEvent {
    pub frame: usize,
    pub class: usize,
    pub doa: [f64; 3],
    pub activity: f64,
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut i = i;
    while parent[i] != r {
        let next = parent[i];
        parent[i] = r;
        i = next;
    }
    r
}

/// Merge similar tracks of one class-frame. Zero-length tracks are inactive.
pub fn unify_tracks(tracks: &[[f64; 3]]) -> Vec<Candidate> {
    let live: Vec<usize> = (0..tracks.len()).filter(|&i| norm3(tracks[i]) > 0.0).collect();
    let mut parent: Vec<usize> = (0..tracks.len()).collect();
    for (a, &i) in live.iter().enumerate() {
        for &j in &live[a + 1..] {
            if angle_deg(tracks[i], tracks[j]) <= UNIFY_ANGLE_DEG {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut out = Vec::new();
    for &root in &live {
        if find(&mut parent, root) != root {
            continue;
        }
        let members: Vec<usize> = live.iter().copied().filter(|&i| find(&mut parent, i) == root).collect();
        let k = members.len() as f64;
        let mut mean = [0.0; 3];
        let mut len = 0.0;
        for &m in &members {
            for d in 0..3 {
                mean[d] += tracks[m][d] / k;
            }
            len += norm3(tracks[m]) / k;
        }
        let n = norm3(mean);
        if n == 0.0 {
            continue;
        }
        out.push(Candidate { doa: [mean[0] / n, mean[1] / n, mean[2] / n], activity: len });
    }
    out
}

pub fn threshold_events(frame: usize, class: usize, candidates: &[Candidate]) -> Vec<DecodedEvent> {
    candidates
        .iter()
        .filter(|c| c.activity > ACTIVITY_THRESHOLD)
        .map(|c| DecodedEvent { frame, class, doa: c.doa, activity: c.activity })
        .collect()
}

pub fn decode(out: &MultiAccdoa) -> Vec<DecodedEvent> {
    let l = out.layout;
    let mut events = Vec::new();
    for t in 0..out.frames {
        for c in 0..l.n_classes {
            let tracks: Vec<[f64; 3]> = (0..l.n_tracks).map(|n| out.vector(t, c, n)).collect();
            events.extend(threshold_events(t, c, &unify_tracks(&tracks)));
        }
    }
    events
}

/// Label rows with a per-class-frame running source index.
pub fn events_to_labels(events: &[DecodedEvent]) -> Vec<EventLabel> {
    let mut out: Vec<EventLabel> = Vec::with_capacity(events.len());
    for e in events {
        let source = out.iter().rev().take_while(|l| l.frame == e.frame && l.class == e.class).count();
        out.push(EventLabel { frame: e.frame, class: e.class, source, doa: e.doa });
    }
    out
}

pub fn events_to_csv(events: &[DecodedEvent]) -> String {
    crate::objective::format_labels(&events_to_labels(events))
}
