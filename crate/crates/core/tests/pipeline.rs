use lwrfit::edie::{edie_grid, edie_matrices, highd_like_fixture};
use lwrfit::estimation::{minimize, EstimationProblem, EstimationResult, Lambda};
use lwrfit::gradients::{gradcheck, GradcheckConfig};
use lwrfit::synth::{generate, rollout_dataset, two_regime_dataset, SynthConfig};
use lwrfit::{ControlField, DensityMatrix, Execution, ParamMode, SchemeKind, SubdivisionSpec};

fn small_synth() -> DensityMatrix {
    let cfg = SynthConfig {
        dx: 4e-3,
        grids: vec![(11, 11)],
        ..SynthConfig::default()
    };
    generate(&cfg, Execution::Sequential).unwrap().matrices.remove(0)
}

#[test]
fn synth_to_estimate_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_synth();
    let control = ControlField::constant(0.2, 11, 11).unwrap();
    let spec = SubdivisionSpec::new(2, 1).unwrap();
    let data = rollout_dataset(&base, spec, SchemeKind::Trm, &control).unwrap();

    let path = dir.path().join("m.csv");
    data.write_csv(&path).unwrap();
    let back = DensityMatrix::read(&path).unwrap();
    assert_eq!(back, data);

    let problem = EstimationProblem::new(back, SchemeKind::Trm, ParamMode::Constant, spec);
    let result = minimize(&problem, Execution::Sequential).unwrap();
    assert!(result.cost <= 1e-10, "cost {}", result.cost);
    assert!((result.c_star.coeffs()[0] - 0.2).abs() < 1e-6);

    let json = result.to_json().unwrap();
    let parsed: EstimationResult = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed.theta_star, result.theta_star);
    assert_eq!(parsed.c_star, result.c_star);
    assert_eq!(parsed.cost_trace, result.cost_trace);
    assert!(parsed.fitted_density.is_none());
}

#[test]
fn execution_modes_agree_exactly() {
    let fixture = highd_like_fixture().unwrap();
    let grid = edie_grid(60, 11, 2.0, 400.0 / 11.0, 0.0, 10.0).unwrap();
    let a = edie_matrices(&fixture, &grid, Execution::Parallel).unwrap();
    let b = edie_matrices(&fixture, &grid, Execution::Sequential).unwrap();
    assert_eq!(a, b);

    let (data, _) = two_regime_dataset(11, 7).unwrap();
    let mut problem = EstimationProblem::new(data, SchemeKind::Trm, ParamMode::Time, SubdivisionSpec::new(2, 1).unwrap());
    problem.lambda = Lambda::Grid(vec![1e-3, 1e-1]);
    problem.optimizer.max_iters = 30;
    let p = minimize(&problem, Execution::Parallel).unwrap();
    let s = minimize(&problem, Execution::Sequential).unwrap();
    assert_eq!(p.theta_star, s.theta_star);
    assert_eq!(p.lambda, s.lambda);

    let cfg = GradcheckConfig {
        instances_per_case: 1,
        ..GradcheckConfig::default()
    };
    let gp = gradcheck(&cfg, Execution::Parallel).unwrap();
    let gs = gradcheck(&cfg, Execution::Sequential).unwrap();
    assert!(gp.passed && gs.passed);
    let key = |r: &lwrfit::gradients::GradcheckReport| r.cases.iter().map(|c| (c.bp_vs_fd, c.fp_vs_bp)).collect::<Vec<_>>();
    assert_eq!(key(&gp), key(&gs));
}

#[test]
fn multi_grid_synthesis_matches_single_grid() {
    let cfg = SynthConfig {
        dx: 4e-3,
        grids: vec![(11, 11), (6, 5)],
        ..SynthConfig::default()
    };
    let both = generate(&cfg, Execution::Parallel).unwrap();
    let one = generate(
        &SynthConfig {
            grids: vec![(6, 5)],
            ..cfg.clone()
        },
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(both.matrices[1], one.matrices[0]);
    assert_eq!(both.matrices[0].grid().shape(), (11, 11));
}
