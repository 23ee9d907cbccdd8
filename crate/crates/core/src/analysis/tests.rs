use proptest::prelude::*;

use super::*;
use crate::grouping::{GroupPartition, LayerShape};
use crate::linalg::Rng;
use crate::model::{flat_linear_regression, two_moons, Activation, Dataset, LossKind, Model, ModelSpec, Targets};
use crate::optim::{l1_dp_step, AltSdpState};

fn lr_data(x: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
    let n = y.len();
    Dataset::new(
        DenseMatrix::from_rows(&x).unwrap(),
        Targets::Values(DenseMatrix::from_row_major(n, 1, y).unwrap()),
        "t",
    )
    .unwrap()
}

fn random_symmetric(rng: &mut Rng, n: usize) -> DenseMatrix {
    let a = DenseMatrix::from_fn(n, n, |_, _| rng.normal());
    a.add(&a.transpose()).unwrap().scale(0.5 / (n as f64).sqrt())
}

#[test]
fn flops_examples() {
    assert_eq!(flops_reduction(&[4, 4, 2], &[vec![], vec![]]).unwrap(), 0.0);
    assert_eq!(flops_reduction(&[4, 4, 2], &[]).unwrap(), 0.0);
    assert_eq!(flops_reduction(&[4, 4, 2], &[vec![0, 3]]).unwrap(), 0.5);
    assert!(matches!(
        flops_reduction(&[4, 4, 2], &[vec![], vec![1]]),
        Err(Error::Structural(_))
    ));
    assert!(matches!(
        flops_reduction(&[4, 4, 2], &[vec![0, 1, 2, 3]]),
        Err(Error::Structural(_))
    ));
    assert!(flops_reduction(&[4, 4, 2], &[vec![4]]).is_err());
    assert!(flops_reduction(&[4, 4, 2], &[vec![1, 1]]).is_err());
}

proptest! {
    #[test]
    fn flops_is_monotone_in_pruned_set(
        hidden in 2usize..12,
        mask in proptest::collection::vec(any::<bool>(), 12),
        extra in 0usize..12,
    ) {
        let sizes = [5, hidden, 3];
        let mut small: Vec<usize> = (0..hidden).filter(|&u| mask[u]).collect();
        if small.len() == hidden {
            small.pop();
        }
        let mut large = small.clone();
        let e = extra % hidden;
        if !large.contains(&e) && large.len() + 1 < hidden {
            large.push(e);
        }
        let a = flops_reduction(&sizes, &[small]).unwrap();
        let b = flops_reduction(&sizes, &[large]).unwrap();
        prop_assert!((0.0..1.0).contains(&a));
        prop_assert!((0.0..1.0).contains(&b));
        prop_assert!(b >= a);
    }
}

#[test]
fn pruned_units_reads_zero_rows() {
    let layout = ParamLayout::new(vec![
        LayerShape { n_in: 2, n_out: 3, bias: true },
        LayerShape { n_in: 3, n_out: 1, bias: true },
    ]);
    let mut w = vec![1.0; layout.dim()];
    for j in layout.unit_indices(0, 1) {
        w[j] = 0.0;
    }
    assert_eq!(pruned_units(&layout, &w).unwrap(), vec![vec![1], vec![]]);
}

#[test]
fn angle_special_cases() {
    let all = GroupPartition::new(3, vec![vec![0, 1, 2]]).unwrap();
    let a = group_angle(&[0.3, -2.0, 5.0], &all).unwrap().unwrap();
    assert!(a.abs() < 1e-6);
    let single = GroupPartition::singletons(3).unwrap();
    assert!(group_angle(&[2.0, -2.0, 2.0], &single).unwrap().unwrap().abs() < 1e-6);
    assert!(group_angle(&[0.0; 3], &single).unwrap().is_none());
    let tilted = group_angle(&[1.0, 0.0, 3.0], &single).unwrap().unwrap();
    let expected = (4.0 / (10f64.sqrt() * 2f64.sqrt())).acos().to_degrees();
    assert!((tilted - expected).abs() < 1e-9);
}

#[test]
fn angle_series_needs_snapshots() {
    let g = GroupPartition::singletons(2).unwrap();
    let mut log = TrajectoryLog::default();
    let entry = |n: u64, w: Option<Vec<f64>>| LogEntry {
        n,
        t: n as f64 * 0.1,
        train_loss: 1.0,
        test_accuracy: None,
        sparsity: 0.0,
        group_norms: None,
        w: w.map(ParamVector::new),
    };
    log.push(entry(0, None)).unwrap();
    assert!(angle_series(&log, &g).is_err());
    log.push(entry(5, Some(vec![0.0, 0.0]))).unwrap();
    log.push(entry(10, Some(vec![1.0, 1.0]))).unwrap();
    let s = angle_series(&log, &g).unwrap();
    assert_eq!(s.len(), 2);
    assert!(s[0].1.is_none());
    assert!(log.push(entry(3, None)).is_err());
    let table = angle_table(&s);
    assert_eq!(table.rows[0][1], "nan");
}

#[test]
fn trajectory_table_columns() {
    let mut log = TrajectoryLog::default();
    log.push(LogEntry {
        n: 3,
        t: 0.3,
        train_loss: 0.5,
        test_accuracy: Some(0.75),
        sparsity: 0.25,
        group_norms: None,
        w: None,
    })
    .unwrap();
    let t = log.to_table();
    assert_eq!(t.header, vec!["n", "t", "train_loss", "test_acc", "sparsity"]);
    assert_eq!(t.rows[0], vec!["3", "0.3", "0.5", "0.75", "0.25"]);
}

#[test]
fn principal_matrix_identity_and_semigroup() {
    let mut rng = Rng::new(4);
    for n in [1, 5, 20] {
        let h = random_symmetric(&mut rng, n);
        let id = principal_matrix(&h, 1.3, 1.3).unwrap();
        assert!(id.max_abs_diff(&DenseMatrix::identity(n)).unwrap() < 1e-9);
        let (t, m, s) = (2.0, 0.7, -0.4);
        let lhs = principal_matrix(&h, t, s).unwrap();
        let rhs = principal_matrix(&h, t, m)
            .unwrap()
            .matmul(&principal_matrix(&h, m, s).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-8);
    }
    let h = DenseMatrix::identity(2);
    assert!(matches!(principal_matrix(&h, 0.0, 1.0), Err(Error::Domain(_))));
}

#[test]
fn principal_matrix_solves_linear_ode() {
    let mut rng = Rng::new(5);
    let h = random_symmetric(&mut rng, 8);
    let (t, s, dt) = (1.1, 0.2, 1e-5);
    let plus = principal_matrix(&h, t + dt, s).unwrap();
    let minus = principal_matrix(&h, t - dt, s).unwrap();
    let deriv = plus.sub(&minus).unwrap().scale(0.5 / dt);
    let hphi = h.matmul(&principal_matrix(&h, t, s).unwrap()).unwrap();
    assert!(deriv.add(&hphi).unwrap().frobenius_norm() <= 1e-6);
}

#[test]
fn slack_trend() {
    assert!(nonincreasing_with_slack(&[3.0, 2.0, 1.0], 1, 0.1));
    assert!(nonincreasing_with_slack(&[3.0, 3.2, 1.0], 1, 0.1));
    assert!(!nonincreasing_with_slack(&[3.0, 3.5, 1.0], 1, 0.1));
    assert!(!nonincreasing_with_slack(&[3.0, 3.1, 3.2], 1, 0.1));
}

fn flat_fixture(seed: u64) -> (Model, Dataset, Vec<f64>, GroupPartition) {
    let fx = flat_linear_regression(seed, 10, 10, 10, (1.0, 4.0)).unwrap();
    let model = Model::new(fx.spec).unwrap();
    let mut rng = Rng::new(seed + 100);
    let w0 = rng.normals(20);
    let g = GroupPartition::contiguous(&[5, 5, 5, 5]).unwrap();
    (model, fx.dataset, w0, g)
}

#[test]
fn theorem2_zero_c_is_exact() {
    let (m, d, w0, g) = flat_fixture(1);
    let p = TheoryParams::new(0.01, 0.0, 0.6, 2.0);
    let s = theorem2_residual(&m, &d, &w0, &g, &p).unwrap();
    assert_eq!(s.points.len(), 50);
    assert!(s.points.iter().all(|p| p.residual == 0.0));
    assert!(s.warnings.is_empty());
}

#[test]
fn theorem2_singleton_matches_l1_baseline() {
    let (m, d, w0, _) = flat_fixture(2);
    let single = GroupPartition::singletons(20).unwrap();
    let p = TheoryParams::new(0.01, 0.5, 0.6, 1.0);
    let s = theorem2_residual(&m, &d, &w0, &single, &p).unwrap();
    let mut st = AltSdpState::new(ParamVector::from(&w0[..]), single, 0.01, 0.5, 0.6).unwrap();
    for _ in 0..100 {
        let grad = m.full_gradient(&st.w, &d).unwrap();
        l1_dp_step(&mut st, &grad).unwrap();
    }
    assert_eq!(s.final_w, st.w);
}

#[test]
fn theorem2_residual_shrinks_with_gamma() {
    let (m, d, w0, g) = flat_fixture(3);
    let finals: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&gamma| {
            let p = TheoryParams::new(gamma, 3.0, 0.6, 5.0);
            theorem2_residual(&m, &d, &w0, &g, &p).unwrap().final_residual()
        })
        .collect();
    assert!(finals[0] > finals[1] && finals[1] > finals[2], "{finals:?}");
}

#[test]
fn theorem2_flags_mu_outside_range() {
    let (m, d, w0, g) = flat_fixture(4);
    let p = TheoryParams::new(0.05, 1.0, 0.4, 1.0);
    let s = theorem2_residual(&m, &d, &w0, &g, &p).unwrap();
    assert_eq!(s.warnings.len(), 1);
}

fn diag_quadratic() -> (Model, Dataset) {
    let m = Model::new(ModelSpec::quadratic(vec![vec![1.0, 0.0]], vec![1.0])).unwrap();
    (m, lr_data(vec![vec![0.0]], vec![0.0]))
}

#[test]
fn theorem3_zero_c_tracks_flow() {
    let (m, d) = diag_quadratic();
    let g = GroupPartition::singletons(2).unwrap();
    let p = TheoryParams::new(1e-3, 0.0, 0.6, 2.0);
    let s = theorem3_deterministic_check(&m, &d, &[3.0, 2.0], &g, &p).unwrap();
    assert!(s.max_residual() < 1e-3, "{}", s.max_residual());
}

#[test]
fn theorem3_diagonal_hand_case() {
    // H = diag(1, 0), w(t) = (1 + 2 e^{-t}, 2): both coordinates stay positive.
    let (m, d) = diag_quadratic();
    let g = GroupPartition::singletons(2).unwrap();
    let p = TheoryParams::new(1e-4, 0.5, 0.6, 2.0);
    let s = theorem3_deterministic_check(&m, &d, &[3.0, 2.0], &g, &p).unwrap();
    assert!(s.final_residual() <= 1e-3, "{}", s.final_residual());
}

#[test]
fn theorem3_detects_sign_crossing() {
    // w1(t) = 1 - 2 e^{-t} crosses zero at t = ln 2.
    let (m, d) = diag_quadratic();
    let g = GroupPartition::singletons(2).unwrap();
    let p = TheoryParams::new(1e-2, 0.5, 0.6, 2.0);
    match theorem3_deterministic_check(&m, &d, &[-1.0, 2.0], &g, &p) {
        Err(Error::SignCrossing { time }) => assert!((time - 2f64.ln()).abs() < 2e-3, "{time}"),
        other => panic!("expected a sign crossing, got {other:?}"),
    }
}

#[test]
fn theorem3_rejects_nonconstant_hessian() {
    let m = Model::new(ModelSpec::mlp(vec![2, 3, 1], Activation::Tanh, LossKind::Mse)).unwrap();
    let d = lr_data(vec![vec![0.1, 0.2]], vec![1.0]);
    let g = GroupPartition::singletons(m.dim()).unwrap();
    let p = TheoryParams::new(1e-2, 0.5, 0.6, 1.0);
    let w0 = vec![0.3; m.dim()];
    assert!(matches!(
        theorem3_deterministic_check(&m, &d, &w0, &g, &p),
        Err(Error::Domain(_))
    ));
}

#[test]
fn theorem3_residual_shrinks_with_gamma() {
    let (m, d, w0, g) = flat_fixture(6);
    let finals: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&gamma| {
            let p = TheoryParams::new(gamma, 3.0, 0.6, 5.0);
            theorem3_deterministic_check(&m, &d, &w0, &g, &p).unwrap().final_residual()
        })
        .collect();
    assert!(finals[0] > finals[1] && finals[1] > finals[2], "{finals:?}");
}

#[test]
fn bezier_endpoints_are_exact() {
    let mut rng = Rng::new(7);
    let a = ParamVector::new(rng.normals(6));
    let b = ParamVector::new(rng.normals(6));
    let mut curve = BezierCurve::new(a.clone(), b.clone()).unwrap();
    curve.theta = ParamVector::new(rng.normals(6));
    assert_eq!(curve.point(0.0), a);
    assert_eq!(curve.point(1.0), b);
}

#[test]
fn bezier_on_convex_quadratic_stays_below_chord() {
    let mut rng = Rng::new(8);
    let x: Vec<Vec<f64>> = (0..12).map(|_| rng.normals(3)).collect();
    let y = rng.normals(12);
    let m = Model::new(ModelSpec::linear_regression(3, 1)).unwrap();
    let d = lr_data(x, y);
    let wa = rng.normals(m.dim());
    let wb = rng.normals(m.dim());
    let params = BezierParams::new(30, 0.05, 4);
    let res = bezier_connect(&m, &d, &wa, &wb, &params, &mut Rng::new(9)).unwrap();
    let chord_max = (0..=100)
        .map(|k| {
            let tau = k as f64 / 100.0;
            let w: Vec<f64> = wa.iter().zip(&wb).map(|(a, b)| (1.0 - tau) * a + tau * b).collect();
            m.full_loss(&w, &d).unwrap()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(res.max_loss <= chord_max + 1e-6);
    assert_eq!(res.profile.len(), 101);
    assert_eq!(res.curve.a.as_ref(), &wa[..]);
    assert_eq!(res.endpoint_losses.0, m.full_loss(&wa, &d).unwrap());
}

#[test]
fn bezier_degenerate_curve() {
    let d = two_moons(1, 40, 0.1).unwrap();
    let m = Model::new(ModelSpec::mlp(vec![2, 4, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy)).unwrap();
    let w = m.init_params(&mut Rng::new(2));
    let params = BezierParams::new(0, 0.1, 8);
    let res = bezier_connect(&m, &d, &w, &w, &params, &mut Rng::new(3)).unwrap();
    let l = m.full_loss(&w, &d).unwrap();
    assert!((res.max_loss - l).abs() < 1e-12);
    assert!(res.barrier().abs() < 1e-12);
}

fn paraboloid() -> (Model, Dataset, DenseMatrix, Vec<f64>) {
    let mut rng = Rng::new(10);
    let x: Vec<Vec<f64>> = (0..8).map(|_| rng.normals(4)).collect();
    let y = rng.normals(8);
    let xm = DenseMatrix::from_rows(&x).unwrap();
    let m = Model::new(ModelSpec::linear_regression(4, 1)).unwrap();
    (m, lr_data(x, y.clone()), xm, y)
}

#[test]
fn plane_grid_matches_closed_form() {
    let (m, d, xm, y) = paraboloid();
    let mut rng = Rng::new(11);
    let (w1, w2, w3) = (rng.normals(4), rng.normals(4), rng.normals(4));
    let grid = plane_contour(&m, &d, None, &w1, &w2, &w3, (7, 5), 0.2).unwrap();
    assert_eq!(grid.values.len(), 35);
    assert!(grid.test_err.is_none());
    let (e1, e2) = &grid.axes;
    assert!((norm(e1) - 1.0).abs() < 1e-9 && (norm(e2) - 1.0).abs() < 1e-9 && dot(e1, e2).abs() < 1e-9);
    for iu in 0..7 {
        for iv in 0..5 {
            let w = grid.point(grid.u(iu), grid.v(iv));
            let pred: Vec<f64> = (0..8).map(|i| dot(xm.row(i), &w)).collect();
            let closed = pred.iter().zip(&y).map(|(p, t)| 0.5 * (p - t).powi(2)).sum::<f64>() / 8.0;
            assert!((grid.value(iu, iv) - closed).abs() <= 1e-9);
        }
    }
    assert_eq!(grid.anchors[0].2, m.full_loss(&w1, &d).unwrap());
    assert!((grid.anchors[1].2 - m.full_loss(&w2, &d).unwrap()).abs() < 1e-9);
    assert!((grid.anchors[2].2 - m.full_loss(&w3, &d).unwrap()).abs() < 1e-9);
    let t = grid.to_table();
    assert_eq!(t.rows.len(), 35);
    assert_eq!(t.rows[0][3], "");
}

#[test]
fn plane_grid_smoke_and_degenerate() {
    let (m, d, _, _) = paraboloid();
    let w1 = vec![0.0; 4];
    let w2 = vec![1.0, 0.0, 0.0, 0.0];
    let w3 = vec![0.0, 1.0, 0.0, 0.0];
    let grid = plane_contour(&m, &d, None, &w1, &w2, &w3, (3, 3), 0.0).unwrap();
    assert_eq!(grid.to_table().rows.len(), 9);
    let w4 = vec![2.0, 0.0, 0.0, 0.0];
    assert!(matches!(
        plane_contour(&m, &d, None, &w1, &w2, &w4, (3, 3), 0.0),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn plane_grid_monotone_along_descent_direction() {
    // Loss 0.5 (w0 - 1)^2 with the plane spanned by e0 and e1.
    let m = Model::new(ModelSpec::linear_regression(2, 1)).unwrap();
    let d = lr_data(vec![vec![1.0, 0.0]], vec![1.0]);
    let w1 = vec![-3.0, 0.0];
    let w2 = vec![-2.0, 0.0];
    let w3 = vec![-3.0, 1.0];
    let grid = plane_contour(&m, &d, None, &w1, &w2, &w3, (3, 3), 0.0).unwrap();
    for iv in 0..3 {
        assert!(grid.value(0, iv) > grid.value(1, iv) && grid.value(1, iv) > grid.value(2, iv));
    }
}

#[test]
fn plane_grid_reports_test_error() {
    let d = two_moons(3, 30, 0.1).unwrap();
    let m = Model::new(ModelSpec::mlp(vec![2, 3, 2], Activation::Tanh, LossKind::SoftmaxCrossEntropy)).unwrap();
    let mut rng = Rng::new(4);
    let (w1, w2, w3) = (m.init_params(&mut rng), m.init_params(&mut rng), m.init_params(&mut rng));
    let grid = plane_contour(&m, &d, Some(&d), &w1, &w2, &w3, (2, 2), 0.1).unwrap();
    let errs = grid.test_err.unwrap();
    assert!(errs.iter().all(|e| (0.0..=1.0).contains(e)));
}
