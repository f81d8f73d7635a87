use dwsep_core::gating::{gate_forward, hidden_size, GateBatchMode, GateParams};
use dwsep_core::{Rng, Tensor};
use proptest::prelude::*;

fn randn(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gate_mixes_inside_the_convex_hull(
        n in 1usize..5, c in 1usize..12, co in 1usize..6, t in 1usize..5, hw in 1usize..5,
        per_example in any::<bool>(), scale in 0.1f64..20.0, seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let h = hidden_size(c);
        let p = [
            randn(&[c, h], scale, &mut rng),
            randn(&[h], scale, &mut rng),
            randn(&[h, t], scale, &mut rng),
            randn(&[t], scale, &mut rng),
        ];
        let params = GateParams { fc1_weight: &p[0], fc1_bias: &p[1], fc2_weight: &p[2], fc2_bias: &p[3] };
        let mode = if per_example { GateBatchMode::PerExample } else { GateBatchMode::BatchMean };
        let x = randn(&[n, c, hw, hw], 1.0, &mut rng);
        let outs: Vec<_> = (0..t).map(|_| randn(&[n, co, hw, hw], 1.0, &mut rng)).collect();
        let (y, s) = gate_forward(&params, mode, &x, &outs).unwrap();

        let rows = if per_example { n } else { 1 };
        prop_assert_eq!(s.shape(), &[rows, t][..]);
        for row in s.data().chunks(t) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for i in 0..y.len() {
            let vals = outs.iter().map(|o| o.data()[i]);
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(y.data()[i] >= lo - 1e-12 && y.data()[i] <= hi + 1e-12);
        }
    }
}
