use std::sync::Arc;

use pstomo::dde::{estimate_distributions, read_distributions_csv, write_distributions_csv, HankelConfig, HankelPlan};
use pstomo::experiment::{distance_histograms, recover_points, recovery_emds, Knobs};
use pstomo::features::{analytic_features, estimate_features, integer_axis, EstimateOptions};
use pstomo::geometry::{generate_model, PointSourceModel};
use pstomo::metrics::emd_1d;
use pstomo::pbde::{estimate_radial_distances, max_matched_error, PbdeOptions};
use pstomo::projector::{simulate, LineSource, ProjectionSet};
use pstomo::udgp::{DistanceOperators, GridSpec};

fn model() -> PointSourceModel {
    PointSourceModel::with_unit_weights(vec![[0.5, 0.0], [-0.25, 0.5], [0.0, -0.5]]).unwrap()
}

#[test]
fn noiseless_features_converge_to_analytic() {
    let m = model();
    let freq = integer_axis(0, 40);
    let truth = analytic_features(&m, &freq);
    let err = |lines: usize| {
        let data = simulate(&m, lines, 800, f64::INFINITY, 3).unwrap();
        let est = estimate_features(&data, 3, &freq, EstimateOptions::default()).unwrap();
        est.mu.iter().zip(&truth.mu).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    };
    let coarse = err(500);
    let fine = err(20_000);
    assert!(fine < 0.1, "{fine}");
    assert!(fine < coarse);
}

#[test]
fn radial_distances_from_noiseless_projections() {
    let m = model();
    let data = simulate(&m, 4_000, 200, f64::INFINITY, 8).unwrap();
    let opts = PbdeOptions::for_half_bins(200);
    let est = estimate_features(&data, 3, &integer_axis(opts.nu_min, opts.nu_max), EstimateOptions::default()).unwrap();
    let radial = estimate_radial_distances(&est, 3, m.radius_bound(), opts).unwrap();
    let err = max_matched_error(&radial.distances, &m.radial_distances()).unwrap();
    assert!(err < 0.05 * m.radius_bound(), "{err}");
}

#[test]
fn distributions_to_points() {
    let m = model();
    let data = simulate(&m, 4_000, 300, 10.0, 5).unwrap();
    let r = m.radius_bound();
    let plan = HankelPlan::new(HankelConfig::for_half_bins(300, r), r).unwrap();
    let dists = estimate_distributions(&data, 3, &plan, EstimateOptions::default()).unwrap();

    let mut csv = Vec::new();
    write_distributions_csv(&mut csv, &dists, None).unwrap();
    let (radial, pairwise) = read_distributions_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
    let (true_pairs, _) = distance_histograms(m.points(), plan.axis()).unwrap();
    assert!(emd_1d(pairwise.as_ref().unwrap(), true_pairs.as_ref().unwrap()).unwrap() < 0.1);

    let knobs = Knobs {
        grid_side: 17,
        ..Knobs::default()
    };
    let ops = Arc::new(DistanceOperators::new(GridSpec::square(17, 1.0).unwrap()));
    let rec = recover_points(&radial, pairwise.as_ref(), ops, 3, &knobs, 1).unwrap();
    assert_eq!(rec.locations.len(), 3);
    let (emd_pairs, emd_radial) = recovery_emds(&rec, &m, plan.axis()).unwrap();
    assert!(emd_pairs < 0.1, "{emd_pairs}");
    assert!(emd_radial < 0.1, "{emd_radial}");
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_model(4, 2, 1.0).unwrap();
    let data = simulate(&m, 50, 20, 5.0, 1).unwrap();
    m.save(&dir.path().join("m.json")).unwrap();
    data.save(&dir.path().join("p.bin")).unwrap();
    assert_eq!(PointSourceModel::load(&dir.path().join("m.json")).unwrap(), m);
    let back = ProjectionSet::load(&dir.path().join("p.bin")).unwrap();
    assert_eq!(back.line_count(), 50);
    assert_eq!(back.noise_variance(), data.noise_variance());
    for i in 0..50 {
        assert_eq!(back.row(i), data.row(i));
    }
    assert!(ProjectionSet::load(&dir.path().join("missing.bin")).is_err());
}
