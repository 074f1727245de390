use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use smlmc::data::{read_dataset, write_dataset, Channel};
use smlmc::kernel::{cross_cov, gram_matrix, se_kernel, BasisKernelParams, CoregionalizationWeights, IndexedInput, StructuredKernel};
use smlmc::linalg::SpdFactor;
use smlmc::online::{condition, paired_t_test};
use smlmc::population::decompose_b;
use smlmc::shrinkage::update_psi;
use smlmc::trainer::{GradientRoute, ParamLayout, Problem};
use smlmc::{ObservationSet, PriorConfig, ShrinkageState};

fn kernel_strategy(d: usize) -> impl Strategy<Value = StructuredKernel> {
    let component = (
        24.0..96.0f64,
        4.0..100.0f64,
        prop::collection::vec(-1.5..1.5f64, d * 2),
        prop::collection::vec(0.0..0.2f64, d),
    );
    (prop::collection::vec(component, 1..=3), prop::collection::vec(0.01..0.5f64, d)).prop_map(move |(comps, noise)| {
        let (basis, weights) = comps
            .into_iter()
            .map(|(period, ls, a, lambda)| {
                (
                    BasisKernelParams::from_period_length_scale(period, ls).unwrap(),
                    CoregionalizationWeights::new(DMatrix::from_row_slice(d, 2, &a), DVector::from_vec(lambda)).unwrap(),
                )
            })
            .unzip();
        StructuredKernel::new(basis, weights, DVector::from_vec(noise)).unwrap()
    })
}

fn inputs_strategy(d: usize, max: usize) -> impl Strategy<Value = Vec<IndexedInput>> {
    prop::collection::vec((0..d, 0.0..200.0f64), 1..=max)
        .prop_map(|v| v.into_iter().map(|(c, t)| IndexedInput::new(c, t)).collect())
}

fn kernel_and_inputs(max: usize) -> impl Strategy<Value = (StructuredKernel, Vec<IndexedInput>)> {
    (1usize..=3).prop_flat_map(move |d| (kernel_strategy(d), inputs_strategy(d, max)))
}

fn cohort_strategy() -> impl Strategy<Value = Vec<ObservationSet>> {
    let channel = prop::collection::vec((0.01..10.0f64, -1e3..1e3f64), 0..6).prop_map(|steps| {
        let mut t = 0.0;
        let mut ch = Channel::default();
        for (dt, v) in steps {
            t += dt;
            ch.times.push(t);
            ch.values.push(v);
        }
        ch
    });
    (1usize..=3).prop_flat_map(move |d| {
        prop::collection::vec(prop::collection::vec(channel.clone(), d), 1..=4).prop_map(move |patients| {
            let names: Vec<String> = (0..d).map(|i| format!("cov_{i}")).collect();
            patients
                .into_iter()
                .enumerate()
                .map(|(i, chs)| ObservationSet::from_channels(format!("pt{i}"), names.clone(), chs).unwrap())
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_is_symmetric_and_factorizes((k, inputs) in kernel_and_inputs(60)) {
        let g = gram_matrix(&inputs, &k, true);
        prop_assert!((&g - g.transpose()).amax() == 0.0);
        prop_assert!(SpdFactor::new(&g).is_ok());
    }

    #[test]
    fn gram_is_stationary((k, inputs) in kernel_and_inputs(20), shift in -500.0..500.0f64) {
        let moved: Vec<IndexedInput> = inputs.iter().map(|x| IndexedInput::new(x.covariate, x.time + shift)).collect();
        let (a, b) = (gram_matrix(&inputs, &k, true), gram_matrix(&moved, &k, true));
        prop_assert!((&a - &b).amax() < 1e-9 * a.amax().max(1.0));
    }

    #[test]
    fn gram_permutes_with_inputs((k, inputs) in kernel_and_inputs(20), seed in any::<u64>()) {
        let n = inputs.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (i as u64).wrapping_mul(seed | 1).rotate_left(17));
        let shuffled: Vec<IndexedInput> = perm.iter().map(|&i| inputs[i]).collect();
        let (a, b) = (gram_matrix(&inputs, &k, true), gram_matrix(&shuffled, &k, true));
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(b[(i, j)], a[(perm[i], perm[j])]);
            }
        }
    }

    #[test]
    fn zero_frequency_is_squared_exponential(ls in 1.0..200.0f64, b in 0.01..4.0f64, t in -100.0..100.0f64, t2 in -100.0..100.0f64) {
        let k = StructuredKernel::new(
            vec![BasisKernelParams::from_period_length_scale(f64::INFINITY, ls).unwrap()],
            vec![CoregionalizationWeights::new(DMatrix::from_element(1, 1, b.sqrt()), DVector::zeros(1)).unwrap()],
            DVector::from_element(1, 0.1),
        ).unwrap();
        let se = se_kernel(t, t2, ls, b.sqrt()).unwrap();
        prop_assert!((cross_cov(0, 0, t, t2, &k) - se).abs() < 1e-12);
    }

    #[test]
    fn features_invert_construction(period in 1.0..500.0f64, ls in 1.0..500.0f64) {
        let (p, l) = BasisKernelParams::from_period_length_scale(period, ls).unwrap().features();
        prop_assert!((p / period - 1.0).abs() < 1e-12 && (l / ls - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_routes_agree((k, inputs) in kernel_and_inputs(30), seed in any::<u64>()) {
        let d = k.n_covariates();
        let mut obs = ObservationSet::new("p", (0..d).map(|i| format!("c{i}")).collect());
        let mut sorted = inputs.clone();
        sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
        for (i, x) in sorted.iter().enumerate() {
            let v = ((seed.wrapping_add(i as u64) % 1000) as f64 / 500.0) - 1.0;
            let _ = obs.push(x.covariate, x.time, v);
        }
        let s = ShrinkageState::new(&k);
        let cfg = PriorConfig::default();
        let problem = Problem::new(&obs, Some((&s, &cfg)));
        let a = problem.evaluate(&k, Some(GradientRoute::PerParameter)).unwrap().gradient.unwrap();
        let b = problem.evaluate(&k, Some(GradientRoute::Contracted)).unwrap().gradient.unwrap();
        prop_assert!((&a - &b).amax() <= 1e-8 * a.amax().max(1.0));
    }

    #[test]
    fn layout_round_trips(k in (1usize..=4).prop_flat_map(kernel_strategy)) {
        let layout = ParamLayout::for_kernel(&k);
        let back = layout.unpack(layout.pack(&k).as_slice()).unwrap();
        prop_assert_eq!(&back.basis, &k.basis);
        prop_assert_eq!(&back.weights, &k.weights);
        prop_assert!((&back.noise_var - &k.noise_var).amax() < 1e-15);
    }

    #[test]
    fn shrinkage_sweeps_stay_positive(k in (1usize..=4).prop_flat_map(kernel_strategy), eta in 0.001..10.0f64, sweeps in 1usize..20) {
        let cfg = PriorConfig::with_eta(eta);
        let mut s = ShrinkageState::new(&k);
        for _ in 0..sweeps {
            s.update(&k, &cfg);
        }
        prop_assert!(s.validate().is_ok());
    }

    #[test]
    fn psi_mode_is_a_stationary_point(a in -5.0..5.0f64, delta in 0.01..10.0f64, alpha in 0.1..4.0f64) {
        prop_assume!(a.abs() > 1e-3);
        let cfg = PriorConfig { alpha, ..PriorConfig::default() };
        let psi = update_psi(a, delta, &cfg);
        let slope = (alpha - 1.5) / psi + a * a / (2.0 * psi * psi) - delta;
        prop_assert!(slope.abs() < 1e-8 * (a * a / (psi * psi)).max(1.0));
    }

    #[test]
    fn decompose_round_trips_at_full_rank(d in 1usize..=5, entries in prop::collection::vec(-2.0..2.0f64, 25)) {
        let a = DMatrix::from_fn(d, d, |i, j| entries[i * 5 + j]);
        let b = &a * a.transpose();
        let w = decompose_b(&b, d).unwrap();
        let rebuilt = &w.a * w.a.transpose() + DMatrix::from_diagonal(&w.lambda);
        prop_assert!((rebuilt - &b).norm() < 1e-8 * b.norm().max(1.0));
    }

    #[test]
    fn conditioning_matches_dense_formula((k, inputs) in kernel_and_inputs(12), q in 0.0..250.0f64) {
        let y = DVector::from_fn(inputs.len(), |i, _| (i as f64 * 0.7).sin());
        let query = IndexedInput::new(inputs[0].covariate, q);
        let (m, v) = condition(&inputs, &y, &k, &[query]).unwrap();
        let g = gram_matrix(&inputs, &k, true);
        let ks = DVector::from_fn(inputs.len(), |i, _| cross_cov(inputs[i].covariate, query.covariate, inputs[i].time, q, &k));
        let inv = g.try_inverse().unwrap();
        let mean = ks.dot(&(&inv * &y));
        let var = k.prior_variance(query.covariate) + k.noise_var[query.covariate] - ks.dot(&(&inv * &ks));
        prop_assert!((m[0] - mean).abs() < 1e-6 * mean.abs().max(1.0));
        prop_assert!((v[0] - var.max(0.0)).abs() < 1e-6 * var.abs().max(1.0));
    }

    #[test]
    fn dataset_round_trips(cohort in cohort_strategy()) {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &cohort).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back, cohort);
    }

    #[test]
    fn t_test_is_antisymmetric(pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = paired_t_test(&a, &b, 2).unwrap();
        let ba = paired_t_test(&b, &a, 2).unwrap();
        prop_assert!((ab.t + ba.t).abs() < 1e-9 * ab.t.abs().max(1.0));
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }
}
