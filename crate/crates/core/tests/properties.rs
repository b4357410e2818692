use forcempc::contact::{force_hertz, ContactSample, HertzModel};
use forcempc::dynamics::{forward_kinematics, inertia, jacobian, RobotGeometry};
use forcempc::gp::{build_posterior, kernel_eval, Dataset, KernelConfig};
use forcempc::ocp::tighten_output_box;
use forcempc::pathref::{eval_path, virtual_step, PathDefinition, VirtualState};
use forcempc::simloop::{read_samples, reduction_percent, write_samples};
use forcempc::Error;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, 3)
}

fn joints() -> impl Strategy<Value = [f64; 3]> {
    (-2.9..2.9f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b, c)| [a, b, c])
}

proptest! {
    #[test]
    fn kernel_is_symmetric_and_bounded(x in point(), y in point(), sf in 0.1..3.0f64, l in 0.05..2.0f64) {
        let k = KernelConfig::new(sf, vec![l, 1.5 * l, 0.5 * l]);
        let a = kernel_eval(&k, &x, &y);
        prop_assert_eq!(a, kernel_eval(&k, &y, &x));
        prop_assert!(a >= 0.0 && a <= sf);
        prop_assert_eq!(kernel_eval(&k, &x, &x), sf);
    }

    #[test]
    fn posterior_variance_between_zero_and_prior(
        rows in prop::collection::vec(point(), 2..12),
        probe in point(),
        noise in 1e-6..0.1f64,
    ) {
        let y: Vec<f64> = rows.iter().map(|r| r[0].sin() + r[1]).collect();
        let data = Dataset::from_rows(&rows, &y, 0.0).unwrap();
        let kernel = KernelConfig::new(1.2, vec![0.7; 3]);
        let gp = build_posterior(&data, &kernel, noise).unwrap();
        let p = gp.predict(&probe).unwrap();
        prop_assert!(p.var >= 0.0);
        prop_assert!(p.var <= 1.2 + 1e-9, "var {} above the prior", p.var);
        prop_assert!(p.mean.is_finite());
    }

    #[test]
    fn tightened_box_shrinks_by_twice_the_backoff(lo in -10.0..10.0f64, width in 0.0..10.0f64, b in 0.0..6.0f64) {
        let hi = lo + width;
        match tighten_output_box(lo, hi, b) {
            Ok((a, c)) => {
                prop_assert!(2.0 * b <= width + 1e-12);
                prop_assert!(lo <= a && a <= c && c <= hi);
                prop_assert!(((c - a) - (width - 2.0 * b)).abs() < 1e-9);
            }
            Err(Error::EmptyTightenedSet { .. }) => prop_assert!(2.0 * b > width - 1e-12),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn inertia_is_symmetric_positive_definite(q in joints()) {
        let m = inertia(&q, &RobotGeometry::default());
        prop_assert!((m - m.transpose()).amax() < 1e-12);
        let eig = m.symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() > 0.0, "eigenvalues {eig}");
    }

    #[test]
    fn jacobian_matches_finite_differences(q in joints()) {
        let g = RobotGeometry::default();
        let j = jacobian(&q, &g);
        let h = 1e-6;
        for k in 0..3 {
            let (mut qp, mut qm) = (q, q);
            qp[k] += h;
            qm[k] -= h;
            let (pp, pm) = (forward_kinematics(&qp, &g).p, forward_kinematics(&qm, &g).p);
            for r in 0..3 {
                prop_assert!((j[(r, k)] - (pp[r] - pm[r]) / (2.0 * h)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn hertz_force_is_nonnegative_and_monotone(d1 in -0.01..0.01f64, d2 in -0.01..0.01f64, k in 1.0..5000.0f64, alpha in 1.0..2.0f64) {
        let m = HertzModel { k_e: k, alpha };
        let (a, b) = (force_hertz(&m, d1.min(d2)), force_hertz(&m, d1.max(d2)));
        prop_assert!(a >= 0.0 && a <= b);
    }

    #[test]
    fn path_is_clamped_outside_its_domain(t in 0.0..3.0f64) {
        let p = PathDefinition::default();
        prop_assert_eq!(eval_path(&p, -1.0 - t), eval_path(&p, -1.0));
        prop_assert_eq!(eval_path(&p, t), eval_path(&p, 0.0));
    }

    #[test]
    fn virtual_steps_compose(z1 in -1.0..0.0f64, z2 in 0.0..1.0f64, v in -5.0..5.0f64, dt in 1e-3..0.05f64) {
        let z = VirtualState { z1, z2 };
        let two = virtual_step(&virtual_step(&z, v, dt), v, dt);
        let one = virtual_step(&z, v, 2.0 * dt);
        prop_assert!((two.z1 - one.z1).abs() < 1e-12 && (two.z2 - one.z2).abs() < 1e-12);
    }

    #[test]
    fn reduction_is_zero_for_equal_and_signed_otherwise(a in 0.01..10.0f64, b in 0.01..10.0f64) {
        prop_assert_eq!(reduction_percent(a, a), 0.0);
        prop_assume!((a - b).abs() > 1e-9);
        let r = reduction_percent(a, b);
        prop_assert_eq!(r > 0.0, b < a);
        prop_assert!(r <= 100.0);
    }

    #[test]
    fn sample_csv_round_trip_is_exact(raw in prop::collection::vec((joints(), -0.01..0.01f64, 0.0..8.0f64), 0..20)) {
        let samples: Vec<ContactSample> = raw.into_iter().map(|(q, delta, force)| ContactSample { q, delta, force }).collect();
        let mut buf = Vec::new();
        write_samples(&samples, &mut buf).unwrap();
        prop_assert_eq!(read_samples(buf.as_slice()).unwrap(), samples);
    }
}
