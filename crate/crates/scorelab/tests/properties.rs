//! Property tests for the algebraic invariants of the kernels and
//! divergences.

use nalgebra::DVector;
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;
use scorelab::forward::{cld_exp_drift, cld_transition, OuTransition};
use scorelab::gauss::{Gaussian, GaussianMixture};
use scorelab::metrics::{gaussian_kl, gaussian_tv, w2_1d};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ou_transition_mean_noise_identity(t in 0.0f64..30.0) {
        let tr = OuTransition::new(t).unwrap();
        prop_assert!((tr.mean_scale * tr.mean_scale + tr.noise_var - 1.0).abs() < 1e-14);
        prop_assert!(tr.noise_var >= 0.0 && tr.noise_var <= 1.0);
    }

    #[test]
    fn ou_semigroup_on_variances(sigma2 in 0.05f64..20.0, s in 0.0f64..4.0, t in 0.0f64..4.0) {
        let once = OuTransition::new(s + t).unwrap();
        let first = OuTransition::new(s).unwrap();
        let second = OuTransition::new(t).unwrap();
        let var_once = once.mean_scale * once.mean_scale * sigma2 + once.noise_var;
        let var_mid = first.mean_scale * first.mean_scale * sigma2 + first.noise_var;
        let var_twice = second.mean_scale * second.mean_scale * var_mid + second.noise_var;
        prop_assert!((var_once - var_twice).abs() < 1e-12 * var_once.max(1.0));
    }

    #[test]
    fn cld_exp_semigroup(gamma in 0.3f64..5.0, s in 0.0f64..2.0, t in 0.0f64..2.0) {
        let a = cld_exp_drift(s, gamma) * cld_exp_drift(t, gamma);
        let b = cld_exp_drift(s + t, gamma);
        prop_assert!((a - b).norm() < 1e-11 * (1.0 + b.norm()));
    }

    #[test]
    fn cld_noise_cov_is_psd(gamma in 0.5f64..4.0, t in 1e-4f64..6.0) {
        let tr = cld_transition(t, gamma).unwrap();
        let eig = nalgebra::SymmetricEigen::new(tr.m1);
        prop_assert!(eig.eigenvalues.min() > -1e-10, "min eig {}", eig.eigenvalues.min());
        prop_assert!((tr.m1[(0, 1)] - tr.m1[(1, 0)]).abs() < 1e-15);
    }

    #[test]
    fn mixture_responsibilities_stay_normalized(x in -200.0f64..200.0, sep in 0.5f64..6.0) {
        let c1 = Gaussian::isotropic(DVector::from_element(1, -sep), 1.0).unwrap();
        let c2 = Gaussian::isotropic(DVector::from_element(1, sep), 0.5).unwrap();
        let mix = GaussianMixture::new(vec![0.3, 0.7], vec![c1, c2]).unwrap();
        let point = DVector::from_element(1, x);
        let r = mix.responsibilities(&point);
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(mix.score(&point)[0].is_finite());
    }

    #[test]
    fn pinsker_for_isotropic_pairs(
        m1 in -3.0f64..3.0,
        m2 in -3.0f64..3.0,
        v1 in 0.2f64..5.0,
        v2 in 0.2f64..5.0,
        d in 1usize..4,
    ) {
        let g1 = Gaussian::isotropic(DVector::from_element(d, m1), v1).unwrap();
        let g2 = Gaussian::isotropic(DVector::from_element(d, m2), v2).unwrap();
        let tv = gaussian_tv::<ChaCha8Rng>(&g1, &g2, None).unwrap().value;
        let kl = gaussian_kl(&g1, &g2);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&tv));
        prop_assert!(kl >= -1e-12);
        prop_assert!(tv <= (kl / 2.0).sqrt() + 1e-9, "tv {tv} kl {kl}");
    }

    #[test]
    fn w2_1d_is_a_symmetric_metric_on_samples(
        a in prop::collection::vec(-10.0f64..10.0, 8..32),
        shift in -5.0f64..5.0,
    ) {
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let ab = w2_1d(&a, &b).unwrap();
        let ba = w2_1d(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((ab - shift.abs()).abs() < 1e-9);
        prop_assert_eq!(w2_1d(&a, &a).unwrap(), 0.0);
    }
}
