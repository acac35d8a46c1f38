use edt_tensor::{permutation_index, OpCounter, Rng, Tensor};
use proptest::prelude::*;

/// Softmax evaluated independently in double precision with a compensated
/// (Kahan) normalizer.
fn reference_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &e in &exps {
        let y = e - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    exps.iter().map(|e| e / sum).collect()
}

proptest! {
    #[test]
    fn matmul_mac_count_is_closed_form(m in 1usize..9, k in 1usize..9, p in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = Tensor::<f32>::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[k, p], 1.0, &mut rng);
        let (_, macs) = OpCounter::measure(|| a.matmul(&b).unwrap());
        prop_assert_eq!(macs, (m * k * p) as u64);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::randn(&[rows, cols], 5.0, &mut rng);
        let s = x.softmax_rows().unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_matches_extended_precision_reference(cols in 1usize..32, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f32>::randn(&[cols], 4.0, &mut rng);
        let s = x.softmax_rows().unwrap();
        for (got, want) in s.data().iter().zip(reference_softmax(x.data())) {
            prop_assert!((*got as f64 - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn permutation_index_is_a_bijection(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let (index, out) = permutation_index(&[a, b, c], &[1, 2, 0]).unwrap();
        prop_assert_eq!(out, vec![b, c, a]);
        let mut sorted = index.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..a * b * c).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_draws_are_reproducible(seed in any::<u64>()) {
        let x = Tensor::<f32>::randn(&[16], 1.0, &mut Rng::new(seed));
        let y = Tensor::<f32>::randn(&[16], 1.0, &mut Rng::new(seed));
        let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(xb, yb);
    }
}
