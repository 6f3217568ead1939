use mpelu::activation::{activation_forward, mpelu_backward, mpelu_forward};
use mpelu::analysis::residual_histogram;
use mpelu::init::msra_std;
use mpelu::layers::conv_output_size;
use mpelu::layers::softmax_cross_entropy;
use mpelu::{residual_bound, residual_exact, taylor_std, ActivationKind, FanInfo, FanMode, Rng, Tensor};
use proptest::prelude::*;

fn tensor(shape: [usize; 4], seed: u64, std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.gaussian_fill(0.0, std, &mut Rng::new(seed)).unwrap();
    t
}

fn fan_mode() -> impl Strategy<Value = FanMode> {
    prop_oneof![
        Just(FanMode::FanIn),
        Just(FanMode::FanOut),
        Just(FanMode::Average)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_length_must_match_shape(a in 1usize..5, b in 1usize..5, extra in 1usize..3) {
        prop_assert!(Tensor::new(vec![a, b], vec![0.0; a * b]).is_ok());
        prop_assert!(Tensor::new(vec![a, b], vec![0.0; a * b + extra]).is_err());
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>()) {
        let (mut r1, mut r2) = (Rng::new(seed), Rng::new(seed));
        for _ in 0..32 {
            prop_assert_eq!(r1.normal().to_bits(), r2.normal().to_bits());
            prop_assert_eq!(r1.uniform().to_bits(), r2.uniform().to_bits());
        }
    }

    #[test]
    fn zero_alpha_is_relu_and_unit_parameters_are_elu(seed in any::<u64>(), beta in 0.01f64..5.0) {
        let y = tensor([2, 3, 2, 2], seed, 3.0);
        let relu = activation_forward(&ActivationKind::ReLU, &y, &[]).unwrap();
        let elu = activation_forward(&ActivationKind::ELU { alpha: 1.0 }, &y, &[]).unwrap();
        prop_assert_eq!(mpelu_forward(&y, &[0.0], &[beta]).unwrap(), relu);
        prop_assert_eq!(mpelu_forward(&y, &[1.0], &[1.0]).unwrap(), elu);
    }

    #[test]
    fn continuous_at_zero(alpha in 0.0f64..100.0, beta in 1e-3f64..10.0) {
        let eps = 1e-12;
        let x = Tensor::new(vec![1, 1, 1, 2], vec![-eps, eps]).unwrap();
        let f = mpelu_forward(&x, &[alpha], &[beta]).unwrap();
        prop_assert!((f.data()[0] - f.data()[1]).abs() <= eps * (1.0 + alpha * beta) + 1e-300);
    }

    #[test]
    fn shared_gradient_is_sum_of_channel_gradients(
        seed in any::<u64>(),
        alpha in 0.05f64..3.0,
        beta in 0.05f64..3.0,
    ) {
        let y = tensor([2, 4, 3, 3], seed, 1.5);
        let g = tensor([2, 4, 3, 3], seed ^ 1, 1.0);
        let shared = mpelu_forward(&y, &[alpha], &[beta]).unwrap();
        let s = mpelu_backward(&y, &shared, &[alpha], &[beta], &g).unwrap();
        let (a4, b4) = (vec![alpha; 4], vec![beta; 4]);
        let wise = mpelu_forward(&y, &a4, &b4).unwrap();
        let w = mpelu_backward(&y, &wise, &a4, &b4, &g).unwrap();
        prop_assert_eq!(s.grad_in.data(), w.grad_in.data());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
        prop_assert!(close(s.d_alpha[0], w.d_alpha.iter().sum()));
        prop_assert!(close(s.d_beta[0], w.d_beta.iter().sum()));
    }

    #[test]
    fn conv_output_size_formula(input in 1usize..64, k in 1usize..8, stride in 1usize..4, pad in 0usize..4) {
        let padded = input + 2 * pad;
        match conv_output_size(input, k, stride, pad) {
            Ok(out) => {
                prop_assert!(padded >= k);
                prop_assert_eq!(out, (padded - k) / stride + 1);
            }
            Err(_) => prop_assert!(padded < k),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), n in 1usize..6, k in 2usize..12, scale in 0.1f64..50.0) {
        let mut logits = Tensor::zeros([n, k]);
        logits.gaussian_fill(0.0, scale, &mut Rng::new(seed)).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let out = softmax_cross_entropy(&logits, &labels).unwrap();
        for row in out.probs.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fan_modes(k in 1usize..8, c_in in 1usize..256, c_out in 1usize..256, mode in fan_mode()) {
        let f = FanInfo::new(k, c_in, c_out, mode).unwrap();
        let (fi, fo) = ((k * k * c_in) as f64, (k * k * c_out) as f64);
        prop_assert_eq!(f.fan_in(), fi);
        prop_assert_eq!(f.fan_out(), fo);
        prop_assert_eq!(f.average(), (fi + fo) / 2.0);
    }

    #[test]
    fn taylor_collapses_to_msra(
        k in 1usize..8,
        c in 1usize..256,
        mode in fan_mode(),
        alpha in 0.0f64..30.0,
        beta in 1e-4f64..4.0,
    ) {
        let fan = FanInfo::new(k, c, c, mode).unwrap();
        prop_assert_eq!(taylor_std(&fan, 0.0, beta).unwrap(), msra_std(&fan, 0.0));
        let t = taylor_std(&fan, alpha, beta).unwrap();
        let m = msra_std(&fan, alpha * beta);
        prop_assert!((t - m).abs() <= 1e-15 * m);
    }

    #[test]
    fn residual_below_lagrange_bound(y in -20.0f64..=0.0, alpha in 0.0f64..100.0, beta in 1e-3f64..3.0) {
        let r = residual_exact(y, alpha, beta).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert!(r <= residual_bound(y, alpha, beta) * (1.0 + 1e-12));
    }

    #[test]
    fn residual_linear_in_alpha(y in -10.0f64..=0.0, alpha in 0.01f64..50.0, beta in 1e-2f64..3.0) {
        let one = residual_exact(y, 1.0, beta).unwrap();
        let r = residual_exact(y, alpha, beta).unwrap();
        prop_assert!((r - alpha * one).abs() <= 1e-12 * r.abs().max(1e-300));
    }

    #[test]
    fn histogram_rescales_and_is_monotone(
        seed in any::<u64>(),
        alpha in 0.1f64..10.0,
        beta in 0.05f64..2.0,
        mut thresholds in proptest::collection::vec(1e-3f64..5.0, 1..6),
    ) {
        thresholds.sort_by(f64::total_cmp);
        let mut rng = Rng::new(seed);
        let xs: Vec<f64> = (0..2000).map(|_| rng.normal()).collect();
        let bins = residual_histogram(&xs, alpha, beta, &thresholds).unwrap();
        prop_assert!(bins.windows(2).all(|w| w[0].fraction <= w[1].fraction));
        prop_assert!(bins.iter().all(|b| (0.0..=1.0).contains(&b.fraction)));
        // sample points exactly on a scaled boundary are vanishingly rare; allow one sample
        let scaled: Vec<f64> = thresholds.iter().map(|t| t / alpha).collect();
        let unit = residual_histogram(&xs, 1.0, beta, &scaled).unwrap();
        for (a, b) in bins.iter().zip(&unit) {
            prop_assert!((a.fraction - b.fraction).abs() <= 1.0 / 2000.0);
        }
    }
}
