mod common;

use lifelong_diffusion::checkpoint::{denoiser_container, denoiser_from_container, Container};
use lifelong_diffusion::eval::{energy_distance, iad};
use lifelong_diffusion::nn::{Denoiser, DenoiserConfig};
use lifelong_diffusion::rng::stream;
use lifelong_diffusion::schedule::{cfg_combine, make_schedule, Spacing};
use lifelong_diffusion::Latent;
use proptest::prelude::*;

#[test]
fn exact_invariants_hold() {
    for (name, holds) in common::exact_invariants() {
        assert!(holds, "{name}");
    }
}

fn points(max: usize) -> impl Strategy<Value = Vec<Latent>> {
    prop::collection::vec(prop::array::uniform2(-5.0f64..5.0), 1..max)
        .prop_map(|v| v.into_iter().map(|p| Latent(p.to_vec())).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_distance_is_symmetric_and_nonnegative(x in points(20), y in points(20)) {
        let a = energy_distance(&x, &y).unwrap();
        let b = energy_distance(&y, &x).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(energy_distance(&x, &x).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn guidance_is_affine_in_the_scale(
        c in prop::array::uniform2(-3.0f64..3.0),
        u in prop::array::uniform2(-3.0f64..3.0),
        g in -2.0f64..10.0,
    ) {
        let (c, u) = (Latent(c.to_vec()), Latent(u.to_vec()));
        let out = cfg_combine(&c, &u, g).unwrap();
        for d in 0..2 {
            prop_assert!((out[d] - (u[d] + g * (c[d] - u[d]))).abs() <= 1e-12);
        }
        let one = cfg_combine(&c, &u, 1.0).unwrap();
        prop_assert!((0..2).all(|d| (one[d] - c[d]).abs() <= 1e-12));
        prop_assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    }

    #[test]
    fn iad_is_scale_invariant(
        pairs in prop::collection::vec((0.05f64..1.0, 0.0f64..1.0), 1..6),
        c in 0.01f64..100.0,
    ) {
        let own: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let last: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let base = iad(&own, &last).unwrap();
        let o: Vec<f64> = own.iter().map(|v| v * c).collect();
        let l: Vec<f64> = last.iter().map(|v| v * c).collect();
        prop_assert!((iad(&o, &l).unwrap() - base).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn schedules_satisfy_their_invariants(steps in 1usize..200, b0 in 1e-5f64..0.05, extra in 0.0f64..0.3) {
        let s = make_schedule(steps, b0, b0 + extra, Spacing::Linear).unwrap();
        prop_assert_eq!(s.alpha_bars()[0], s.alphas()[0]);
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn checkpoints_round_trip_arbitrary_parameters(seed in any::<u64>(), scale in -1e6f64..1e6) {
        let config = DenoiserConfig { hidden_dims: vec![5], ..DenoiserConfig::default() };
        let mut model = Denoiser::init(config, &mut stream(seed, "p")).unwrap();
        model.params_mut().iter_mut().for_each(|p| *p *= scale);
        let bytes = denoiser_container(&model).encode().unwrap();
        let back = denoiser_from_container(&Container::decode(&bytes).unwrap()).unwrap();
        prop_assert!(back.params().iter().zip(model.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
