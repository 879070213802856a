//! Property tests over randomly drawn inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qtraj::adaptive::{controller_phase, PhaseController};
use qtraj::detection::{gaussian_effect_params, polygon_area, wigner_contour, RecordFunctionals};
use qtraj::dynamics::{direct_detection_ops, unitary_rearrange, LindbladModel};
use qtraj::fock::fidelity;
use qtraj::trajectories::{
    replay_trajectory, run_trajectory, SamplingStrategy, Scheme, TrajectorySettings,
};
use qtraj::{FockSpace, C64};

fn diffusive_settings() -> TrajectorySettings {
    TrajectorySettings {
        scheme: Scheme::Diffusive,
        strategy: SamplingStrategy::OstensibleC { lambda1: None },
        dt: 1e-2,
        t_final: 0.5,
        keep_record: true,
        ..TrajectorySettings::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn record_functionals_stay_in_the_disc(
        steps in prop::collection::vec((0.0..std::f64::consts::TAU, -0.3f64..0.3), 1..300),
    ) {
        let dt = 1e-2;
        let mut f = RecordFunctionals::default();
        for (phi, dw) in steps {
            f = f.accumulate(phi, dw, dt);
        }
        prop_assert!(f.s.norm() <= -(-f.t).exp_m1() * (1.0 + 1e-12));
    }

    #[test]
    fn effect_ellipse_has_unit_area(
        t in 0.1f64..20.0, frac in 0.0f64..0.99, arg_s in -3.2f64..3.2,
        rr in -3.0f64..3.0, ri in -3.0f64..3.0,
    ) {
        let k = -(-t).exp_m1();
        let f = RecordFunctionals::new(C64::new(rr, ri), C64::from_polar(frac * k, arg_s), t);
        let g = gaussian_effect_params(&f).unwrap();
        prop_assert!((g.vx * g.vy - 1.0).abs() < 1e-12);
        prop_assert!(g.vx >= 1.0);
        let pts = wigner_contour(&g, 4096).unwrap();
        prop_assert!((polygon_area(&pts) / std::f64::consts::PI - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rearranged_pairs_share_the_nonselective_map(
        gr in -2.0f64..2.0, gi in -2.0f64..2.0, seed in any::<u64>(),
    ) {
        let space = FockSpace::new(4).unwrap();
        let model = LindbladModel::damped_mode(space);
        let base = direct_detection_ops(&model, C64::new(0.0, 0.0), 1e-3).unwrap();
        let mixed = unitary_rearrange(&base, C64::new(gr, gi)).unwrap();
        let rho = qtraj::random::density(space, &mut ChaCha8Rng::seed_from_u64(seed));
        let d = base.nonselective(rho.entries()) - mixed.nonselective(rho.entries());
        prop_assert!(d.iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn feedback_phase_depends_only_on_the_past(seed in any::<u64>(), k in 1usize..49, bump in 0.05f64..1.0) {
        // changing the increment of step k leaves the phases of steps <= k alone
        let space = FockSpace::qubit();
        let model = LindbladModel::damped_mode(space);
        let psi0 = qtraj::random::state(space, &mut ChaCha8Rng::seed_from_u64(seed));
        let ctrl = PhaseController::adaptive_single();
        let settings = diffusive_settings();
        let first = run_trajectory(&psi0, &model, &settings, &ctrl, seed).unwrap();
        let mut record = first.record.clone().unwrap();
        record.dw.as_mut().unwrap()[k] += bump;
        let second = replay_trajectory(&psi0, &model, &settings, &ctrl, &record).unwrap();
        let (p1, p2) = (first.record.unwrap().phases.unwrap(), second.record.unwrap().phases.unwrap());
        prop_assert_eq!(&p1[..=k], &p2[..=k]);
        prop_assert!(p1[k + 1..] != p2[k + 1..]);
    }

    #[test]
    fn replay_is_exact(seed in any::<u64>()) {
        let space = FockSpace::new(3).unwrap();
        let model = LindbladModel::damped_mode(space);
        let psi0 = qtraj::random::state(space, &mut ChaCha8Rng::seed_from_u64(seed));
        let ctrl = PhaseController::AdaptiveMean;
        let settings = diffusive_settings();
        let a = run_trajectory(&psi0, &model, &settings, &ctrl, seed).unwrap();
        let b = replay_trajectory(&psi0, &model, &settings, &ctrl, a.record.as_ref().unwrap()).unwrap();
        prop_assert_eq!(a.final_state.weight, b.final_state.weight);
        prop_assert_eq!(a.final_state.state.amps(), b.final_state.state.amps());
        prop_assert!(fidelity(&a.final_state.state, &b.final_state.state).unwrap() > 1.0 - 1e-15);
    }

    #[test]
    fn controllers_wrap_into_one_turn(
        rr in -2.0f64..2.0, ri in -2.0f64..2.0, t in 0.0f64..30.0, phase in -10.0f64..10.0,
    ) {
        let f = RecordFunctionals::new(C64::new(rr, ri), C64::new(0.0, 0.0), t);
        for ctrl in [
            PhaseController::Constant { phase },
            PhaseController::Heterodyne { phase0: phase, detuning: 50.0 },
            PhaseController::adaptive_single(),
            PhaseController::AdaptiveMean,
        ] {
            let p = controller_phase(&ctrl, &f, t);
            prop_assert!(p.is_finite());
            let again: PhaseController = ctrl.to_string().parse().unwrap();
            prop_assert_eq!(again, ctrl);
        }
    }
}
