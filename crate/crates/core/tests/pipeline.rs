use std::f64::consts::PI;

use proptest::prelude::*;

use nearfield::bounds::{bound_report, crb_position, fim};
use nearfield::channel::{synthesize_noiseless, synthesize_snapshot};
use nearfield::harness::config::{BoundSelection, GeometryConfig, PartitionConfig, Spacing};
use nearfield::harness::report::read_trials_csv;
use nearfield::harness::{run_experiment, sweep, write_outputs, ExperimentConfig, Method, SweepAxis};
use nearfield::omp::Window;
use nearfield::{
    omp_estimate, run_aple, ApleConfig, ArrayGeometry, ComplexGain, PartitionPlan, PolarGrid, PolarPoint, TrueParam,
    UeLocation,
};

fn plan(n: usize, m: usize) -> PartitionPlan {
    PartitionPlan::new(ArrayGeometry::square(n, 0.0075, 0.03).unwrap(), m, m).unwrap()
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        geometry: GeometryConfig {
            n_x: 24,
            n_y: 24,
            spacing: Spacing::Wavelengths(0.25),
            frequency_hz: 1e10,
        },
        partition: PartitionConfig { m_x: 2, m_y: 2 },
        r: nearfield::harness::Sampled::Fixed(2.0),
        trials: 5,
        seed: 77,
        methods: vec![Method::Aple, Method::Eaple, Method::Omp],
        record_runtime: false,
        ..ExperimentConfig::default()
    }
}

#[test]
fn csv_output_is_byte_identical_across_runs() {
    let mut cfg = small_config();
    cfg.omp.window = Some(nearfield::harness::config::OmpWindow {
        r_half_width: 0.2,
        angle_half_width: 0.06,
    });
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let points = run_experiment(&cfg).unwrap();
        write_outputs(d.path(), &cfg, &points, std::time::SystemTime::now(), 0.0).unwrap();
    }
    for name in ["summary.csv", "trials_snr_db_20.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let rows = read_trials_csv(std::fs::File::open(dirs[0].path().join("trials_snr_db_20.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r.err_m.unwrap() >= 0.0 && r.runtime_s.is_none()));
}

#[test]
fn distance_sweep_reports_each_value_on_shared_draws() {
    let mut cfg = small_config();
    cfg.methods = vec![Method::Eaple];
    cfg.bounds = BoundSelection { crb: true, mcrb: false };
    let points = sweep(&cfg, SweepAxis::Distance, &[1.5, 3.0]).unwrap();
    assert_eq!(points.len(), 2);
    for p in &points {
        assert_eq!(p.summary.len(), 1);
        assert!(p.records.iter().all(|r| r.r == p.value));
    }
    // Same angles at every distance.
    let angles = |k: usize| -> Vec<(f64, f64)> { points[k].records.iter().map(|r| (r.omega, r.phi)).collect() };
    assert_eq!(angles(0), angles(1));
    // Bounds grow with range.
    assert!(points[1].summary[0].crb_m > points[0].summary[0].crb_m);
}

#[test]
fn omp_picks_a_lattice_node() {
    let p = plan(24, 2);
    let q = PolarPoint::new(2.03, 1.01, 0.49);
    let snap = synthesize_snapshot(&p.geometry, &UeLocation::from_polar(q).unwrap(), ComplexGain::from_polar(1.0, 0.0), 1e-3, 5)
        .unwrap();
    let grid = PolarGrid::windowed(
        0.5,
        10.0,
        Some(Window { lo: 1.8, hi: 2.3 }),
        Some(Window { lo: 0.9, hi: 1.1 }),
        Some(Window { lo: 0.4, hi: 0.6 }),
    )
    .unwrap();
    let est = omp_estimate(&snap, &p.geometry, &grid).unwrap();
    let found = PolarPoint::from_cartesian(&est.p_hat);
    let on_lattice = |v: f64, origin: f64, step: f64| ((v - origin) / step - ((v - origin) / step).round()).abs() < 1e-6;
    assert!(on_lattice(found.r, 0.5, 0.1) && on_lattice(found.omega, 0.0, 0.02) && on_lattice(found.phi, 0.0, 0.02));
    assert!((found.to_cartesian() - q.to_cartesian()).norm() < 0.15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn noiseless_message_passing_lands_near_the_source(
        r in 1.5f64..4.0,
        omega in 0.0f64..2.0 * PI,
        phi in 0.1f64..1.2,
        m in 2usize..4,
    ) {
        let p = plan(24, m);
        let q = PolarPoint::new(r, omega, phi);
        let snap = synthesize_noiseless(&p.geometry, &UeLocation::from_polar(q).unwrap(), ComplexGain::from_polar(1.0, 0.3), 1e-4)
            .unwrap();
        let est = run_aple(&snap, &p, &ApleConfig::default()).unwrap();
        let err = (est.p_hat - q.to_cartesian()).norm();
        prop_assert!(err < 0.05 * r, "err {err} at {q:?}");
        prop_assert!(est.belief.cov.cholesky().is_some());
    }

    #[test]
    fn misspecified_bound_dominates_the_exact_bound(
        r in 1.5f64..4.0,
        omega in 0.0f64..2.0 * PI,
        phi in 0.1f64..1.2,
    ) {
        let p = plan(16, 2);
        let t = TrueParam::new(PolarPoint::new(r, omega, phi).to_cartesian(), ComplexGain::from_polar(1.0, 0.4)).unwrap();
        let b = bound_report(&t, &p, 0.01).unwrap();
        prop_assert!(b.mcrb_pos >= b.crb_pos * (1.0 - 1e-9));
        let direct = crb_position(&fim(&p.geometry, &t, 0.01).unwrap()).unwrap();
        prop_assert!((direct - b.crb_pos).abs() <= 1e-12 * direct);
    }
}
