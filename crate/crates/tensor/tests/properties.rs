use proptest::prelude::*;
use seld_tensor::ops::{fold, softmax_last, unfold};
use seld_tensor::Tensor;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Reference packing: output (c*kt*kf + i*kf + j, p, q) <- input (c, p*kt + i, q*kf + j).
fn unfold_oracle(x: &Tensor<f64>, kt: usize, kf: usize) -> Vec<f64> {
    let (c, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (gt, gf) = (t / kt, f / kf);
    let mut out = vec![0.0; x.numel()];
    for ci in 0..c {
        for i in 0..kt {
            for j in 0..kf {
                for p in 0..gt {
                    for q in 0..gf {
                        let oc = ci * kt * kf + i * kf + j;
                        out[(oc * gt + p) * gf + q] = x.at(&[ci, p * kt + i, q * kf + j]);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn unfold_small_example_matches_oracle() {
    let x = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
    let y = unfold(&x, 2, 2).unwrap();
    assert_eq!(y.shape(), &[4, 1, 1]);
    assert_eq!(y.data(), unfold_oracle(&x, 2, 2).as_slice());
    assert_eq!(y.data(), &[1., 2., 3., 4.]);
    let back = fold(&y, 2, 2).unwrap();
    assert_eq!(back.shape(), &[1, 2, 2]);
    assert_eq!(back.data(), &[1., 2., 3., 4.]);
}

#[test]
fn fold_inverts_unfold_for_5x4_kernel() {
    let x = Tensor::<f64>::from_fn(&[3, 50, 16], |i| (i as f64 * 0.37).sin());
    assert_eq!(fold(&unfold(&x, 5, 4).unwrap(), 5, 4).unwrap(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fold_unfold_roundtrip(c in 1usize..4, gt in 1usize..5, gf in 1usize..5, kt in 1usize..6, kf in 1usize..5, seed in any::<u64>()) {
        let shape = [c, gt * kt, gf * kf];
        let x = Tensor::<f64>::from_fn(&shape, |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 - 500.0);
        let u = unfold(&x, kt, kf).unwrap();
        prop_assert_eq!(u.shape(), &[c * kt * kf, gt, gf]);
        let expected = unfold_oracle(&x, kt, kf);
        prop_assert_eq!(u.data(), expected.as_slice());
        prop_assert_eq!(fold(&u, kt, kf).unwrap(), x);
    }

    #[test]
    fn softmax_rows_normalized_and_order_preserving(row in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let n = row.len();
        let x = Tensor::new(vec![1, n], row.clone()).unwrap();
        let y = softmax_last(&x).unwrap();
        let s: f64 = y.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(argmax(&row), argmax(y.data()));
    }
}

#[test]
fn softmax_constant_row_is_uniform() {
    let x = Tensor::<f64>::full(&[1, 7], 3.5);
    let y = softmax_last(&x).unwrap();
    for &v in y.data() {
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }
}
