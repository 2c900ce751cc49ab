use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_core::accdoa::{doa_from_angles, norm3};
use seld_core::decode::{decode, events_to_labels};
use seld_core::evalmetrics::compute_metrics;
use seld_core::features::FeatureTensor;
use seld_core::infertools::{ctai, inference_overlap, kmeans, AcsTransform, CtaiConfig, KMeansConfig, OverlapConfig};
use seld_core::objective::{adpit_loss, vtm_loss, AdpitTargets, VtmGradient};
use seld_core::{Layout, MultiAccdoa};
use seld_tensor::gradcheck::{check_gradients, GradCheckConfig};
use seld_tensor::{Graph, Mode, Tensor};

/// Brute force over every map tracks -> events, keeping the onto ones.
fn brute_force_adpit(pred: &[f64], targets: &AdpitTargets) -> f64 {
    let l = targets.layout;
    let (nt, w) = (l.n_tracks, l.width());
    let mut sq = vec![0.0; pred.len()];
    for t in 0..targets.frames {
        for c in 0..l.n_classes {
            let ev = targets.events(t, c);
            let k = ev.len();
            let span = &pred[t * w + l.index(c, 0, 0)..t * w + l.index(c, 0, 0) + nt * 3];
            let mut best: Option<(f64, Vec<[f64; 3]>)> = None;
            let total = if k == 0 { 1 } else { k.pow(nt as u32) };
            for code in 0..total {
                let assign: Vec<usize> = (0..nt).map(|n| if k == 0 { 0 } else { code / k.pow((nt - 1 - n) as u32) % k }).collect();
                if k > 0 && (0..k).any(|e| !assign.contains(&e)) {
                    continue;
                }
                let tgt: Vec<[f64; 3]> = assign.iter().map(|&e| if k == 0 { [0.0; 3] } else { ev[e] }).collect();
                let err: f64 = (0..nt * 3).map(|i| (span[i] - tgt[i / 3][i % 3]).powi(2)).sum();
                if best.as_ref().map_or(true, |b| err < b.0) {
                    best = Some((err, tgt));
                }
            }
            let tgt = best.unwrap().1;
            for i in 0..nt * 3 {
                let d = span[i] - tgt[i / 3][i % 3];
                sq[t * w + l.index(c, 0, 0) + i] = d * d;
            }
        }
    }
    sq.iter().sum::<f64>() * (1.0 / (targets.frames * l.n_classes * nt) as f64)
}

fn random_targets(rng: &mut ChaCha8Rng, layout: Layout, frames: usize) -> AdpitTargets {
    let mut t = AdpitTargets::empty(layout, frames);
    for f in 0..frames {
        for c in 0..layout.n_classes {
            for _ in 0..rng.gen_range(0..=3) {
                t.push(f, c, doa_from_angles(rng.gen_range(-180.0..180.0), rng.gen_range(-60.0..60.0))).unwrap();
            }
        }
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn adpit_matches_brute_force(seed in any::<u64>(), frames in 1usize..=4, classes in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::new(classes, 3);
        let targets = random_targets(&mut rng, layout, frames);
        let pred: Vec<f64> = (0..frames * layout.width()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new(Mode::Eval);
        let p = g.constant(Tensor::new(vec![frames, layout.width()], pred.clone()).unwrap()).unwrap();
        let (loss, _) = adpit_loss(&mut g, p, std::slice::from_ref(&targets)).unwrap();
        prop_assert_eq!(g.value(loss).item(), brute_force_adpit(&pred, &targets));
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in any::<u64>(), n in 3usize..40, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = kmeans(&pts, &KMeansConfig { k, max_iter: 500, n_init: 2, seed }).unwrap();
        prop_assert!(r.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert_eq!(r.centers.len(), k.min(n));
    }
}

#[test]
fn single_event_duplicates_on_every_track() {
    let layout = Layout::new(1, 3);
    let mut t = AdpitTargets::empty(layout, 1);
    t.push(0, 0, [1.0, 0.0, 0.0]).unwrap();
    let pred = MultiAccdoa::from_vec(layout, 1, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let v = seld_core::objective::adpit_loss_value(&pred, &t).unwrap();
    assert!((v - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn adpit_and_vtm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layout = Layout::new(2, 3);
    let targets = vec![random_targets(&mut rng, layout, 3), random_targets(&mut rng, layout, 3)];
    // random directions, track lengths kept away from the 0.5 mask boundary
    let mut data = Vec::new();
    for i in 0..2 * 3 * layout.n_classes * layout.n_tracks {
        let len = if i % 2 == 0 { rng.gen_range(0.1..0.4) } else { rng.gen_range(0.6..0.9) };
        let d = doa_from_angles(rng.gen_range(-180.0..180.0), rng.gen_range(-60.0..60.0));
        data.extend(d.map(|x| x * len));
    }
    let pred = Tensor::new(vec![2, 3, layout.width()], data).unwrap();
    let cfg = GradCheckConfig { eps: 1e-6, ..Default::default() };
    let adpit = check_gradients(
        std::slice::from_ref(&pred),
        |g, v| Ok(adpit_loss(g, v[0], &targets).map_err(|e| seld_tensor::TensorError::Usage(e.to_string()))?.0),
        &cfg,
    )
    .unwrap();
    assert!(adpit.passes(1e-4), "{adpit:?}");
    let vtm = check_gradients(
        std::slice::from_ref(&pred),
        |g, v| Ok(vtm_loss(g, v[0], &targets, VtmGradient::Hard).map_err(|e| seld_tensor::TensorError::Usage(e.to_string()))?.0),
        &cfg,
    )
    .unwrap();
    assert!(vtm.passes(1e-4), "{vtm:?}");
}

#[test]
fn ideal_output_decodes_to_reference_events() {
    let layout = Layout::new(3, 3);
    let frames = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut targets = AdpitTargets::empty(layout, frames);
    for f in 0..frames {
        for c in 0..3 {
            let k = rng.gen_range(0..=3);
            for e in 0..k {
                let az = -150.0 + 100.0 * e as f64 + rng.gen_range(-10.0..10.0);
                targets.push(f, c, doa_from_angles(az, rng.gen_range(-20.0..20.0))).unwrap();
            }
        }
    }
    let mut out = MultiAccdoa::zeros(layout, frames);
    for f in 0..frames {
        for c in 0..3 {
            let cand = &targets.candidates(f, c)[0];
            for (n, v) in cand.iter().enumerate() {
                out.set_vector(f, c, n, *v);
            }
        }
    }
    let refs = targets.to_labels();
    let preds = events_to_labels(&decode(&out));
    assert_eq!(preds.len(), refs.len());
    let r = compute_metrics(&preds, &refs, 3).unwrap();
    assert_eq!((r.er20, r.f1_20, r.lr_cd), (0.0, 1.0, 1.0));
    assert!(r.le_cd < 1e-6 && r.seld_score < 1e-8);
}

fn constant_output(layout: Layout, frames: usize, v: f64) -> MultiAccdoa {
    MultiAccdoa::from_vec(layout, frames, vec![v; frames * layout.width()]).unwrap()
}

#[test]
fn overlap_fusion_of_constant_model_is_identity() {
    let layout = Layout::new(2, 3);
    let feat = FeatureTensor::new(Tensor::zeros(&[7, 1000, 64])).unwrap();
    let res = inference_overlap(&feat, OverlapConfig::seconds(5.0, 1.0), |ws| {
        Ok(ws.iter().map(|w| constant_output(layout, w.frames() / 5, 0.25)).collect())
    })
    .unwrap();
    assert_eq!(res.output, constant_output(layout, 200, 0.25));
    assert_eq!(res.counts[100], 5);
    assert_eq!(res.counts[0], 1);
}

#[test]
fn overlap_uses_median_per_component() {
    let layout = Layout::new(1, 1);
    let feat = FeatureTensor::new(Tensor::zeros(&[7, 1500, 64])).unwrap();
    // window i predicts i everywhere, so frame t sees the starts covering it
    let res = inference_overlap(&feat, OverlapConfig::seconds(5.0, 1.0), |ws| {
        Ok((0..ws.len()).map(|i| constant_output(layout, 50, i as f64)).collect())
    })
    .unwrap();
    // frame 55 is covered by windows starting at 10, 20, ..., 50 -> indices 1..=5
    assert_eq!(res.counts[55], 5);
    assert_eq!(res.output.frame(55)[0], 3.0);
    // frame 15 is covered by windows 0 and 1 -> mean of the two middle values
    assert_eq!(res.output.frame(15)[0], 0.5);
}

#[test]
fn ctai_recovers_permuted_bundles_and_rejects_outliers() {
    let layout = Layout::new(1, 3);
    let frames = 10;
    let sigma = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let means: Vec<[f64; 3]> = [0.0, 120.0, -120.0].iter().map(|&az| doa_from_angles(az, 0.0)).collect();
    let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
    let mut noisy = |perm: &[usize]| {
        let mut m = MultiAccdoa::zeros(layout, frames);
        for t in 0..frames {
            for (n, &b) in perm.iter().enumerate() {
                let v = means[b];
                m.set_vector(t, 0, n, [0, 1, 2].map(|d| v[d] + rng.sample(normal)));
            }
        }
        m
    };
    let original = noisy(&[0, 1, 2]);
    let perms = [[1, 2, 0], [2, 0, 1], [0, 2, 1], [1, 0, 2], [2, 1, 0]];
    let mut rotated: Vec<MultiAccdoa> = perms.iter().map(|p| noisy(p)).collect();
    rotated.push(constant_output(layout, frames, 0.9));
    let res = ctai(&original, &rotated, &CtaiConfig::default()).unwrap();
    assert_eq!(res.survivors, vec![0, 1, 2, 3, 4]);
    for t in 0..frames {
        for (n, mean) in means.iter().enumerate() {
            let v = res.output.vector(t, 0, n);
            for d in 0..3 {
                assert!((v[d] - mean[d]).abs() < 3.0 * sigma);
            }
        }
    }
    let alone = ctai(&original, &rotated[5..], &CtaiConfig::default()).unwrap();
    assert_eq!(alone.output, original);
}

#[test]
fn unrotating_all_transforms_restores_outputs() {
    let layout = Layout::new(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let out = MultiAccdoa::from_vec(layout, 4, (0..4 * layout.width()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    for t in AcsTransform::all() {
        let mut rotated = out.clone();
        for chunk in rotated.data.chunks_exact_mut(3) {
            chunk.copy_from_slice(&t.apply_doa([chunk[0], chunk[1], chunk[2]]));
        }
        assert_eq!(t.unrotate_output(&rotated), out);
        assert!(rotated.data.chunks_exact(3).zip(out.data.chunks_exact(3)).all(|(a, b)| {
            (norm3([a[0], a[1], a[2]]) - norm3([b[0], b[1], b[2]])).abs() < 1e-15
        }));
    }
}
