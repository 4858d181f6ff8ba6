use billiardlab::billiard::SpeedBand;
use billiardlab::ikawa::{estimate_alpha_star, pressure_partial_sum, AlphaStar, Verdict};
use billiardlab::io::parse_scene;
use billiardlab::orbits::enumerate_orbits;
use billiardlab::parametrix::{decay_profile, midpoint_grid, Multiplicity};

const SCENE: &str = r#"{"obstacles": [
  {"kind": "sphere", "center": [0, 0, 0], "radius": 1},
  {"kind": "ellipsoid", "center": [7, 0, 0], "semiaxes": [1.2, 1, 0.8],
   "orientation": [[1, 0, 0], [0, 1, 0], [0, 0, 1]]},
  {"kind": "sphere", "center": [3.5, 6, 0.5], "radius": 1.1}
]}"#;

#[test]
fn scene_file_to_decay() {
    let scene = parse_scene(SCENE).unwrap();
    let table = enumerate_orbits(&scene, 10).unwrap();
    assert!(table.failures.is_empty(), "{:?}", table.failures);
    assert_eq!(table.orbits.iter().filter(|o| o.len() == 2).count(), 3);

    let report = pressure_partial_sum(&table, 0.0, 10, false).unwrap();
    assert_eq!(report.verdict, Verdict::Converges);
    let est = estimate_alpha_star(&table, 10, 10.0, false).unwrap();
    match est.alpha_star {
        AlphaStar::Bracket { lo, hi } => assert!(lo < hi && hi - lo < 1e-6),
        other => panic!("{other:?}"),
    }

    let band = SpeedBand::new(1.0, 1.0).unwrap();
    let grid = midpoint_grid(0.0, 30.0, 200);
    for mode in [
        Multiplicity::Exact,
        Multiplicity::HullDiameter,
        Multiplicity::MinGap,
    ] {
        let p = decay_profile(&scene, &table, &grid, band, mode, None);
        assert!(
            p.fit.mu > 0.0 && p.fit_bound.mu > 0.0,
            "{mode:?}: {:?}",
            p.fit_bound
        );
        let fitted: Vec<_> = p.rows.iter().filter(|r| r.t >= p.t0).collect();
        assert!(fitted.last().unwrap().d < fitted[0].d);
    }
}
