use ocmlab::numerics::{AdamConfig, DenseMatrix};
use ocmlab::ot::{
    exact_w2, f_tilde, generated, lemma_bounds, mean_elbo, theorem1_report, theorem2_report,
    DiagOptions, EmpiricalDistribution, HALF_LN_PI,
};
use ocmlab::rng::{self, standard_normal, stream_rng};
use ocmlab::stream::gen_synthetic;
use ocmlab::vae::{gaussian_kl, DecoderFamily, Objective, VaeArch, VaeComponent};
use proptest::prelude::*;

const SIGMA: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn emp(m: DenseMatrix) -> EmpiricalDistribution {
    EmpiricalDistribution::new(m).unwrap()
}

fn arch(d: usize, hidden: usize) -> VaeArch {
    VaeArch {
        data_dim: d,
        latent_dim: 2,
        encoder_hidden: vec![hidden],
        decoder_hidden: vec![hidden],
        family: DecoderFamily::Gaussian { sigma: SIGMA },
    }
}

fn train(x: &DenseMatrix, seed: u64, epochs: usize) -> VaeComponent {
    let adam = AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    };
    let mut c = VaeComponent::new(&arch(x.cols(), 16), adam, &mut stream_rng(seed, 0)).unwrap();
    let mut r = stream_rng(seed, 1);
    for _ in 0..epochs {
        for start in (0..x.rows()).step_by(25) {
            let idx: Vec<usize> = (start..(start + 25).min(x.rows())).collect();
            c.train_step(&x.select_rows(&idx), Objective::Elbo, &mut r)
                .unwrap();
        }
    }
    c
}

/// Decoder that ignores `z` and emits `point`; encoder outputs the prior.
fn constant_model(point: &[f64]) -> VaeComponent {
    let mut c = VaeComponent::new(
        &arch(point.len(), 4),
        AdamConfig::default(),
        &mut stream_rng(0, 0),
    )
    .unwrap();
    c.encoder.values_mut().for_each(|v| *v = 0.0);
    c.decoder.values_mut().for_each(|v| *v = 0.0);
    let last = c.decoder.layers().len() - 1;
    c.decoder.layers_mut()[last].bias = point.to_vec();
    c
}

fn repeated(point: &[f64], n: usize) -> DenseMatrix {
    DenseMatrix::from_vec(
        n,
        point.len(),
        point
            .iter()
            .copied()
            .cycle()
            .take(n * point.len())
            .collect(),
    )
    .unwrap()
}

fn random_set(seed: u64, n: usize, d: usize) -> EmpiricalDistribution {
    emp(standard_normal(&mut stream_rng(seed, 3), n, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn root_w2_obeys_triangle_inequality(seed in 0u64..10_000, n in 1usize..=10, d in 1usize..4) {
        let (a, b, c) = (random_set(seed, n, d), random_set(seed + 1, n, d), random_set(seed + 2, n, d));
        let ab = exact_w2(&a, &b).unwrap().sqrt();
        let bc = exact_w2(&b, &c).unwrap().sqrt();
        let ac = exact_w2(&a, &c).unwrap().sqrt();
        prop_assert!(ac <= ab + bc + 1e-9, "{ac} > {ab} + {bc}");
    }

    #[test]
    fn w2_is_symmetric_and_zero_on_itself(seed in 0u64..10_000, n in 1usize..=8) {
        let (a, b) = (random_set(seed, n, 3), random_set(seed + 7, n, 3));
        prop_assert_eq!(exact_w2(&a, &b).unwrap(), exact_w2(&b, &a).unwrap());
        prop_assert_eq!(exact_w2(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn f_tilde_collapses_to_transport_cost_for_prior_posterior_and_zero_residual() {
    let p = [0.5, -1.0, 2.0];
    let c = constant_model(&p);
    let m = emp(repeated(&p, 10));
    let opts = DiagOptions::default();
    let ft = f_tilde(&c.view(), &m, 10, &opts).unwrap();
    let w = exact_w2(&m, &generated(&c.view(), 10, &opts, 1).unwrap()).unwrap();
    assert_eq!(ft, w);
    assert_eq!(ft, 0.0);
}

#[test]
fn f_tilde_is_stable_across_seeds_on_converged_one_dimensional_model() {
    let x = gen_synthetic(1, 1, 2000, 0.0, 11).unwrap().samples;
    let c = train(&x, 4, 20);
    let m = emp(x);
    let vals: Vec<f64> = (0..3)
        .map(|s| {
            let opts = DiagOptions {
                elbo_samples: 4,
                seed: 100 + s,
            };
            f_tilde(&c.view(), &m, 2000, &opts).unwrap()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / 3.0;
    assert!(mean.is_finite() && mean > 0.0, "{vals:?}");
    for v in &vals {
        assert!((v - mean).abs() <= 0.1 * mean, "{vals:?}");
    }
}

#[test]
fn exact_reconstruction_of_a_single_point() {
    let p = [1.0, 2.0, -0.5, 0.25];
    let c = constant_model(&p);
    let target = emp(repeated(&p, 6));
    let opts = DiagOptions::default();
    let t = theorem1_report(&c.view(), &target, &opts).unwrap();
    // Prior posterior: KL is zero, so the ELBO is the decoder constant alone.
    let kl = gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]);
    assert_eq!(kl, 0.0);
    let d = p.len() as f64;
    assert!((t.lhs - (-d * HALF_LN_PI - kl)).abs() < 1e-12, "{}", t.lhs);
    assert!((t.rhs + HALF_LN_PI).abs() < 1e-12);
    assert_eq!(t.w_x_g, 0.0);
    // d > 1: the bound side sits above the measured ELBO.
    assert!(t.gap > 0.0);
}

#[test]
fn dropping_a_mode_from_memory_raises_target_distance() {
    let ds = gen_synthetic(2, 3, 40, 6.0, 21).unwrap();
    let labels = ds.labels.clone().unwrap();
    let target = emp(ds.samples.clone());
    let a: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == 0).collect();
    let b: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == 1).collect();
    let covering: Vec<usize> = a
        .iter()
        .take(10)
        .chain(b.iter().take(10))
        .copied()
        .collect();
    let dropping: Vec<usize> = a.iter().take(20).copied().collect();
    let w_cover = exact_w2(&target, &emp(ds.samples.select_rows(&covering))).unwrap();
    let w_drop = exact_w2(&target, &emp(ds.samples.select_rows(&dropping))).unwrap();
    assert!(w_drop > w_cover, "{w_drop} <= {w_cover}");

    let c = VaeComponent::new(&arch(3, 8), AdamConfig::default(), &mut stream_rng(3, 0)).unwrap();
    let opts = DiagOptions::default();
    let r_cover = theorem2_report(
        &c.view(),
        &emp(ds.samples.select_rows(&covering)),
        &target,
        &opts,
    )
    .unwrap();
    let r_drop = theorem2_report(
        &c.view(),
        &emp(ds.samples.select_rows(&dropping)),
        &target,
        &opts,
    )
    .unwrap();
    assert!(r_drop.w_x_m > r_cover.w_x_m);
}

#[test]
fn mode_dropping_memory_trains_a_worse_model() {
    let train_set = gen_synthetic(2, 4, 200, 8.0, 31).unwrap();
    let held_out = gen_synthetic(2, 4, 100, 8.0, 32).unwrap();
    let labels = train_set.labels.clone().unwrap();
    let a: Vec<usize> = (0..train_set.len()).filter(|&i| labels[i] == 0).collect();
    let b: Vec<usize> = (0..train_set.len()).filter(|&i| labels[i] == 1).collect();
    let covering: Vec<usize> = a
        .iter()
        .take(50)
        .chain(b.iter().take(50))
        .copied()
        .collect();
    let dropping: Vec<usize> = a.iter().take(100).copied().collect();
    let target = emp(held_out.samples.clone());
    let opts = DiagOptions::default();
    let mut results = Vec::new();
    for idx in [&covering, &dropping] {
        let mem = train_set.samples.select_rows(idx);
        let model = train(&mem, 8, 60);
        let w = exact_w2(&target, &emp(mem)).unwrap();
        let elbo = mean_elbo(&model.view(), &held_out.samples, &opts, 9).unwrap();
        results.push((w, elbo));
    }
    let ((w_cover, e_cover), (w_drop, e_drop)) = (results[0], results[1]);
    assert!(w_drop > w_cover, "{w_drop} <= {w_cover}");
    assert!(e_cover > e_drop, "{e_cover} <= {e_drop}");
}

#[test]
fn per_target_maximum_dominates_each_single_model() {
    let ds = gen_synthetic(2, 3, 120, 6.0, 41).unwrap();
    let labels = ds.labels.clone().unwrap();
    let modes: Vec<DenseMatrix> = (0..2)
        .map(|k| {
            ds.samples.select_rows(
                &(0..ds.len())
                    .filter(|&i| labels[i] == k)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let models: Vec<VaeComponent> = modes
        .iter()
        .enumerate()
        .map(|(k, m)| train(m, 50 + k as u64, 40))
        .collect();
    let memories: Vec<EmpiricalDistribution> = modes
        .iter()
        .map(|m| emp(m.select_rows(&(0..30).collect::<Vec<_>>())))
        .collect();
    let targets: Vec<EmpiricalDistribution> = modes
        .iter()
        .map(|m| emp(m.select_rows(&(30..60).collect::<Vec<_>>())))
        .collect();
    let opts = DiagOptions {
        elbo_samples: 4,
        seed: 1,
    };
    let pairs: Vec<_> = models
        .iter()
        .zip(&memories)
        .map(|(c, m)| (c.view(), m.clone()))
        .collect();
    let both = lemma_bounds(&pairs, &targets, &opts).unwrap();
    for p in &pairs {
        let one = lemma_bounds(std::slice::from_ref(p), &targets, &opts).unwrap();
        assert!(
            both.aggregate >= one.aggregate,
            "{} < {}",
            both.aggregate,
            one.aggregate
        );
    }
    // Each target is claimed by the component trained on its mode's memory.
    let claimed: Vec<usize> = both.per_target.iter().map(|t| t.component).collect();
    assert_eq!(claimed, vec![0, 1]);
}

#[test]
fn reports_are_deterministic_under_fixed_seeds() {
    let x = standard_normal(&mut stream_rng(rng::derive_seed(1, 2, 3), 0), 20, 3);
    let c = train(&x, 2, 5);
    let opts = DiagOptions::default();
    let t = emp(x);
    assert_eq!(
        theorem1_report(&c.view(), &t, &opts).unwrap(),
        theorem1_report(&c.view(), &t, &opts).unwrap()
    );
    assert_eq!(
        theorem2_report(&c.view(), &t, &t, &opts).unwrap(),
        theorem2_report(&c.view(), &t, &t, &opts).unwrap()
    );
}
