use std::sync::OnceLock;

use proptest::prelude::*;
use pwrecon_core::io::{Container, Kind};
use pwrecon_core::metrics::{cnr, gcnr, speckle_snr};
use pwrecon_core::multisample::{aggregate, SampleBundle};
use pwrecon_core::pipeline::{self, Model};
use pwrecon_core::sampler::{coefficients_for_noise, Branch};
use pwrecon_core::Config;

fn small_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut cfg = Config::default();
        cfg.grid.x = [-1e-3, 1e-3];
        cfg.grid.z = [19e-3, 21e-3];
        cfg.grid.n_x = 6;
        cfg.grid.n_z = 6;
        let setup = cfg.setup().unwrap();
        pipeline::build_model(&cfg, setup, None).unwrap().0
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

proptest! {
    #[test]
    fn step_noise_variance_matches_target_level(
        sigma_t in 1e-3f64..50.0,
        frac in 0.0f64..0.999,
        sigma_y in prop_oneof![Just(f64::INFINITY), 1e-4f64..100.0],
        eta in 0.0f64..=1.0,
        eta_b in 0.0f64..=1.0,
    ) {
        let sigma_prev = frac * sigma_t;
        let c = coefficients_for_noise(sigma_t, sigma_prev, sigma_y, eta, eta_b);
        let expected = if !sigma_y.is_finite() {
            Branch::Unobserved
        } else if sigma_prev < sigma_y {
            Branch::Noisy
        } else {
            Branch::Anchored
        };
        prop_assert_eq!(c.branch, expected);
        prop_assert!(c.a >= 0.0 && c.b >= 0.0 && c.d >= 0.0);
        prop_assert!((c.a + c.b + c.c - 1.0).abs() < 1e-12);
        let v = c.noise_variance(sigma_t, sigma_y);
        prop_assert!((v - sigma_prev * sigma_prev).abs() <= 1e-10 * (1.0 + sigma_prev * sigma_prev));
    }

    #[test]
    fn forward_and_adjoint_agree(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let m = small_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let o: Vec<f64> = (0..m.h.cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..m.h.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs = dot(&m.h.apply_forward(&o).unwrap(), &y);
        let rhs = dot(&o, &m.h.apply_adjoint(&y).unwrap());
        let scale = norm(&m.h.apply_forward(&o).unwrap()) * norm(&y) + 1e-300;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);

        let v: Vec<f64> = (0..m.b.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs = dot(&m.b.apply(&y).unwrap(), &v);
        let rhs = dot(&y, &m.b.apply_transpose(&v).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn aggregate_ignores_sample_order(
        images in (2usize..8, 1usize..20).prop_flat_map(|(m, n)| {
            prop::collection::vec(prop::collection::vec(-1e3f64..1e3, n), m)
        }),
        rot in 0usize..8,
    ) {
        let mut shuffled = images.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let a = aggregate(&SampleBundle::new(images, 1, "h").unwrap()).unwrap();
        let b = aggregate(&SampleBundle::new(shuffled, 1, "h").unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn container_round_trips(
        kind in prop_oneof![Just(Kind::Channel), Just(Kind::Image), Just(Kind::Bundle), Just(Kind::MatrixCache)],
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
        label in "[a-z]{0,12}",
        number in any::<i32>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let payload: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>() * 1e6 - 5e5).collect();
        let c = Container::new(kind, vec![rows, cols], payload)
            .unwrap()
            .with_attr("label", &label)
            .with_attr("number", number);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.attr::<String>("label").unwrap(), label);
    }

    #[test]
    fn region_metrics_ignore_global_gain(
        env in prop::collection::vec(1e-3f64..10.0, 240),
        gain in 1e-3f64..1e3,
        exponent in -20i32..20,
    ) {
        let inside: Vec<bool> = (0..env.len()).map(|i| i < 110).collect();
        let outside: Vec<bool> = inside.iter().map(|b| !b).collect();
        let scaled: Vec<f64> = env.iter().map(|v| v * gain).collect();

        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
        prop_assert!(close(cnr(&env, &inside, &outside).unwrap(), cnr(&scaled, &inside, &outside).unwrap()));
        prop_assert!(close(speckle_snr(&env, &inside).unwrap(), speckle_snr(&scaled, &inside).unwrap()));

        // histogram binning is exact under power-of-two gains
        let pow2: Vec<f64> = env.iter().map(|v| v * 2f64.powi(exponent)).collect();
        prop_assert_eq!(gcnr(&env, &inside, &outside, 50).unwrap(), gcnr(&pow2, &inside, &outside, 50).unwrap());
    }
}
