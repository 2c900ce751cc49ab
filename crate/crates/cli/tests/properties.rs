//! Property tests for augmentations, the schedule and the config echo.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_cli::augment::{acs, frameshift, time_mask, Example};
use seld_cli::config::TriStageFractions;
use seld_cli::train::TriStage;
use seld_cli::RunConfig;
use seld_core::accdoa::doa_from_angles;
use seld_core::features::FeatureTensor;
use seld_core::infertools::AcsTransform;
use seld_core::objective::AdpitTargets;
use seld_core::Layout;
use seld_tensor::Tensor;

fn example(seed: u64, label_frames: usize) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Tensor::from_fn(&[7, label_frames * 5, 64], |_| rng.gen_range(-1.0f32..1.0));
    let mut targets = AdpitTargets::empty(Layout::new(2, 3), label_frames);
    for f in 0..label_frames {
        for c in 0..2 {
            if rng.gen_bool(0.4) {
                targets.push(f, c, doa_from_angles(rng.gen_range(-180.0..180.0), rng.gen_range(-60.0..60.0))).unwrap();
            }
        }
    }
    Example { feat: FeatureTensor::new(data).unwrap(), targets }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frameshift_is_a_group_action(seed in 0u64..1000, frames in 1usize..12, a in -20isize..20, b in -20isize..20) {
        let ex = example(seed, frames);
        prop_assert_eq!(frameshift(&frameshift(&ex, a), -a), ex.clone());
        prop_assert_eq!(frameshift(&frameshift(&ex, a), b), frameshift(&ex, a + b));
        prop_assert_eq!(frameshift(&ex, frames as isize), ex);
    }

    #[test]
    fn time_mask_clears_only_its_span(seed in 0u64..1000, frames in 1usize..12, start in 0usize..12, len in 0usize..6) {
        let ex = example(seed, frames);
        let m = time_mask(&ex, start, len);
        for f in 0..frames {
            let inside = f >= start && f < start + len;
            for c in 0..2 {
                if inside {
                    prop_assert!(m.targets.events(f, c).is_empty());
                } else {
                    prop_assert_eq!(m.targets.events(f, c), ex.targets.events(f, c));
                }
            }
        }
        prop_assert_eq!(time_mask(&m, start, len), m);
    }

    #[test]
    fn acs_round_trips(seed in 0u64..1000, id in 0usize..16) {
        let ex = example(seed, 4);
        let t = AcsTransform::all()[id];
        prop_assert_eq!(acs(&acs(&ex, t), t.inverse()), ex);
    }

    #[test]
    fn tri_stage_stays_within_bounds(peak in 1e-5f64..1e-2, total in 1usize..500) {
        let s = TriStage { peak, total_steps: total, fractions: TriStageFractions::default() };
        for step in 0..total {
            let lr = s.lr(step);
            prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12), "step {} lr {}", step, lr);
        }
    }

    #[test]
    fn config_echo_round_trips(seed in 0u64..1000, batch in 1usize..64, seq in prop::sample::select(vec![5u32, 10, 20]), io in any::<bool>()) {
        let text = format!("preset=base\nn_classes=13\nseed={seed}\nbatch_size={batch}\nseq_len_s={seq}\nio={io}\n");
        let cfg = RunConfig::parse_str(&text).unwrap();
        prop_assert_eq!(RunConfig::parse_str(&cfg.to_string()).unwrap(), cfg);
    }
}
