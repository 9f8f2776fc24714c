use mfinverse::data::{synth_generate, Grid};
use mfinverse::ensemble::{train_bundle, EnsembleConfig, TrainConfig};
use mfinverse::forest::ForestParams;
use mfinverse::harness::{baseline_sweep, evaluate_on_test, learning_curve, Pipeline};
use mfinverse::metrics::{Bounds, EvalReport};

#[test]
fn learning_curve_improves_with_data() {
    let grid = Grid::band(31).unwrap();
    let ds = synth_generate(400, &grid, 0.01, 4).unwrap();
    let cfg = TrainConfig {
        n_components: 10,
        forward: ForestParams::forward().with_trees(30).with_seed(2),
        inverse: None,
        bounds: Bounds::default(),
    };
    let pts = learning_curve(&ds, &[50, 200], 5, &cfg, 8).unwrap();
    assert_eq!(pts.len(), 2);
    assert!(pts.iter().all(|p| p.fold_rmse.len() == 5));
    assert!(pts[1].mean_rmse <= pts[0].mean_rmse + pts[0].std_rmse);
    assert_eq!(pts, learning_curve(&ds, &[50, 200], 5, &cfg, 8).unwrap());
}

#[test]
fn evaluation_and_sweep() {
    let grid = Grid::band(31).unwrap();
    let train = synth_generate(500, &grid, 0.01, 6).unwrap();
    let test = synth_generate(12, &grid, 0.01, 7).unwrap();
    let cfg = TrainConfig {
        n_components: 10,
        forward: ForestParams::forward().with_trees(40).with_seed(1),
        inverse: Some(ForestParams::inverse().with_seed(2)),
        bounds: Bounds::default(),
    };
    let b = train_bundle(&train, &cfg).unwrap();
    let ecfg = EnsembleConfig::default();

    let mf = evaluate_on_test(&b, &test, Pipeline::Mf, &ecfg, 2).unwrap();
    // Report aggregates are recomputable from the per-instance rows.
    let top: Vec<_> = mf.top_rows().collect();
    let again = EvalReport::from_instances(
        top.iter().map(|r| r.rmse).collect(),
        top.iter().map(|r| r.nepd).collect(),
    )
    .unwrap();
    assert_eq!(again, mf.report);
    assert_eq!(mf.repeat_mean_rmse.len(), 2);

    let hf = evaluate_on_test(&b, &test, Pipeline::Hf, &ecfg, 2).unwrap();
    assert!(mf.report.average_rmse < hf.report.average_rmse);

    let sweep = baseline_sweep(&b, &test, &[25, 50], &ecfg, 2).unwrap();
    assert_eq!(sweep.len(), 4);
    assert_eq!(
        sweep.iter().map(|r| (r.mode, r.n_max)).collect::<Vec<_>>(),
        vec![
            (Pipeline::Mf, 25),
            (Pipeline::Hf, 25),
            (Pipeline::Mf, 50),
            (Pipeline::Hf, 50)
        ]
    );
    assert_eq!(sweep[1].mean_rmse, hf.report.average_rmse);
}

#[test]
fn mismatched_test_grid_is_rejected() {
    let grid = Grid::band(31).unwrap();
    let train = synth_generate(100, &grid, 0.01, 6).unwrap();
    let other = synth_generate(3, &Grid::band(11).unwrap(), 0.01, 7).unwrap();
    let cfg = TrainConfig {
        n_components: 5,
        forward: ForestParams::forward().with_trees(5),
        ..Default::default()
    };
    let b = train_bundle(&train, &cfg).unwrap();
    assert!(evaluate_on_test(&b, &other, Pipeline::Lf, &EnsembleConfig::default(), 1).is_err());
}
