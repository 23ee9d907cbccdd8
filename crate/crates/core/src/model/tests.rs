use proptest::prelude::*;

use super::*;
use crate::linalg::{matrix_exp_scaled, norm, sub, Rng};

fn lr_data(x: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
    let n = y.len();
    Dataset::new(
        DenseMatrix::from_rows(&x).unwrap(),
        Targets::Values(DenseMatrix::from_row_major(n, 1, y).unwrap()),
        "t",
    )
    .unwrap()
}

fn fd_gradient(model: &Model, w: &[f64], data: &Dataset, batch: &Batch) -> Vec<f64> {
    (0..w.len())
        .map(|j| {
            let h = 1e-5 * (1.0 + w[j].abs());
            let mut wp = w.to_vec();
            let mut wm = w.to_vec();
            wp[j] += h;
            wm[j] -= h;
            (model.loss(&wp, data, batch).unwrap() - model.loss(&wm, data, batch).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b)) / norm(b).max(1e-8)
}

fn random_regression(rng: &mut Rng, n: usize, d_in: usize, d_out: usize) -> Dataset {
    let x = DenseMatrix::from_fn(n, d_in, |_, _| rng.normal());
    let y = DenseMatrix::from_fn(n, d_out, |_, _| rng.normal());
    Dataset::new(x, Targets::Values(y), "r").unwrap()
}

fn random_classes(rng: &mut Rng, n: usize, d_in: usize, k: usize) -> Dataset {
    let x = DenseMatrix::from_fn(n, d_in, |_, _| rng.normal());
    let labels = (0..n).map(|_| rng.below(k)).collect();
    Dataset::new(x, Targets::Classes { labels, n_classes: k }, "c").unwrap()
}

fn random_batch(rng: &mut Rng, n: usize) -> Batch {
    let size = 1 + rng.below(n);
    Batch::new((0..size).map(|_| rng.below(n)).collect(), n).unwrap()
}

#[test]
fn loss_examples() {
    let m = Model::new(ModelSpec::linear_regression(1, 1)).unwrap();
    let d = lr_data(vec![vec![1.0]], vec![0.0]);
    assert_eq!(m.loss(&[0.0], &d, &Batch::full(1)).unwrap(), 0.0);
    let d = lr_data(vec![vec![1.0], vec![2.0]], vec![1.0, 2.0]);
    assert_eq!(m.loss(&[0.0], &d, &Batch::full(2)).unwrap(), 1.25);
}

#[test]
fn uniform_softmax_is_ln2() {
    let m = Model::new(ModelSpec::mlp(vec![2, 3, 2], Activation::Tanh, LossKind::SoftmaxCrossEntropy)).unwrap();
    let mut rng = Rng::new(1);
    let mut w = m.init_params(&mut rng).into_inner();
    // zero the output layer so logits are uniform
    for x in &mut w[9..] {
        *x = 0.0;
    }
    let d = random_classes(&mut rng, 7, 2, 2);
    let l = m.full_loss(&w, &d).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn spec_validation() {
    assert!(Model::new(ModelSpec::mlp(vec![2, 2], Activation::Relu, LossKind::Mse)).is_err());
    assert!(Model::new(ModelSpec::mlp(vec![2, 0, 2], Activation::Relu, LossKind::Mse)).is_err());
    let mut lr = ModelSpec::linear_regression(2, 1);
    lr.activation = Activation::Tanh;
    assert!(Model::new(lr).is_err());
    let mut q = ModelSpec::quadratic(vec![vec![1.0]], vec![1.0]);
    q.quadratic_data = None;
    assert!(Model::new(q).is_err());
    let json = r#"{"kind":"mlp","layer_sizes":[2,4,2],"activation":"relu","loss":"softmax_cross_entropy","bogus":1}"#;
    assert!(serde_json::from_str::<ModelSpec>(json).is_err());
}

#[test]
fn dimension_mismatch() {
    let m = Model::new(ModelSpec::linear_regression(2, 1)).unwrap();
    let d = lr_data(vec![vec![1.0, 2.0]], vec![0.0]);
    assert!(matches!(m.loss(&[0.0], &d, &Batch::full(1)), Err(Error::Dimension { .. })));
    let d3 = lr_data(vec![vec![1.0, 2.0, 3.0]], vec![0.0]);
    assert!(m.loss(&[0.0, 0.0], &d3, &Batch::full(1)).is_err());
}

#[test]
fn quadratic_gradient_closed_form() {
    let mut rng = Rng::new(2);
    let x: Vec<Vec<f64>> = (0..6).map(|_| rng.normals(4)).collect();
    let y = rng.normals(6);
    let m = Model::new(ModelSpec::quadratic(x.clone(), y.clone())).unwrap();
    let xm = DenseMatrix::from_rows(&x).unwrap();
    let dummy = lr_data(vec![vec![0.0]], vec![0.0]);
    for _ in 0..5 {
        let w = rng.normals(4);
        let r = sub(&xm.matvec(&w).unwrap(), &y);
        let expected: Vec<f64> = xm.tmatvec(&r).unwrap().iter().map(|v| v / 6.0).collect();
        let g = m.full_gradient(&w, &dummy).unwrap();
        assert!(crate::linalg::max_abs_diff(&g, &expected) < 1e-12);
    }
}

#[test]
fn dead_relu_unit_has_zero_incoming_gradient() {
    let m = Model::new(ModelSpec::mlp(vec![2, 2, 1], Activation::Relu, LossKind::Mse)).unwrap();
    let mut rng = Rng::new(3);
    let d = random_regression(&mut rng, 5, 2, 1);
    let mut w = m.init_params(&mut rng).into_inner();
    // unit 1: zero weights, bias -1 => always negative
    w[2] = 0.0;
    w[3] = 0.0;
    w[5] = -1.0;
    let g = m.full_gradient(&w, &d).unwrap();
    assert_eq!(&g[2..4], &[0.0, 0.0]);
    assert_eq!(g[5], 0.0);
}

#[test]
fn relu_kink_uses_zero_subgradient() {
    let m = Model::new(ModelSpec::mlp(vec![1, 1, 1], Activation::Relu, LossKind::Mse)).unwrap();
    let d = lr_data(vec![vec![1.0]], vec![1.0]);
    // pre-activation exactly 0
    let w = [1.0, -1.0, 2.0, 0.0];
    let g = m.full_gradient(&w, &d).unwrap();
    assert_eq!(g[0], 0.0);
    assert_eq!(g[1], 0.0);
}

#[test]
fn full_gradient_examples() {
    let mut rng = Rng::new(4);
    let m = Model::new(ModelSpec::mlp(vec![3, 4, 2], Activation::Tanh, LossKind::Mse)).unwrap();
    let d = random_regression(&mut rng, 9, 3, 2);
    let w = m.init_params(&mut rng);
    let full = m.full_gradient(&w, &d).unwrap();
    let mut avg = vec![0.0; w.len()];
    for i in 0..9 {
        let g = m.grad(&w, &d, &Batch::new(vec![i], 9).unwrap()).unwrap();
        for (a, gi) in avg.iter_mut().zip(g.iter()) {
            *a += gi / 9.0;
        }
    }
    assert!(crate::linalg::max_abs_diff(&full, &avg) < 1e-12);

    let one = d.subset(&[4], "one").unwrap();
    assert_eq!(
        m.full_gradient(&w, &one).unwrap(),
        m.grad(&w, &d, &Batch::new(vec![4], 9).unwrap()).unwrap()
    );

    let twice: Vec<usize> = (0..9).chain(0..9).collect();
    let doubled = d.subset(&twice, "twice").unwrap();
    let g2 = m.full_gradient(&w, &doubled).unwrap();
    assert!(crate::linalg::max_abs_diff(&full, &g2) < 1e-14);
}

#[test]
fn loss_is_permutation_invariant() {
    let mut rng = Rng::new(5);
    let m = Model::new(ModelSpec::mlp(vec![3, 5, 3], Activation::Relu, LossKind::SoftmaxCrossEntropy)).unwrap();
    let d = random_classes(&mut rng, 100, 3, 3);
    let w = m.init_params(&mut rng);
    let perm = rng.permutation(100);
    let shuffled = d.subset(&perm, "p").unwrap();
    let a = m.full_loss(&w, &d).unwrap();
    let b = m.full_loss(&w, &shuffled).unwrap();
    assert!((a - b).abs() <= 1e-13 * a.abs());
}

#[test]
fn evaluation_is_deterministic() {
    let mut rng = Rng::new(6);
    let m = Model::new(ModelSpec::mlp(vec![4, 8, 2], Activation::Tanh, LossKind::Mse)).unwrap();
    let d = random_regression(&mut rng, 300, 4, 2);
    let w = m.init_params(&mut rng);
    let a = m.loss_and_grad(&w, &d, &Batch::full(300)).unwrap();
    for _ in 0..3 {
        assert_eq!(m.loss_and_grad(&w, &d, &Batch::full(300)).unwrap(), a);
    }
}

#[test]
fn hessian_examples() {
    let m = Model::new(ModelSpec::linear_regression(2, 1)).unwrap();
    let d = lr_data(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.3, -0.2]);
    let h = m.hessian_fd(&[0.4, 0.9], &d, DEFAULT_HESSIAN_CAP).unwrap();
    assert!(h.max_abs_diff(&DenseMatrix::from_diag(&[0.5, 0.5])).unwrap() < 1e-9);

    let mut rng = Rng::new(7);
    let x: Vec<Vec<f64>> = (0..8).map(|_| rng.normals(5)).collect();
    let q = Model::new(ModelSpec::quadratic(x.clone(), rng.normals(8))).unwrap();
    let xm = DenseMatrix::from_rows(&x).unwrap();
    let exact = xm.transpose().matmul(&xm).unwrap().scale(1.0 / 8.0);
    let h1 = q.hessian_fd(&rng.normals(5), &d, DEFAULT_HESSIAN_CAP).unwrap();
    let h2 = q.hessian_fd(&rng.normals(5), &d, DEFAULT_HESSIAN_CAP).unwrap();
    assert!(h1.max_abs_diff(&exact).unwrap() < 1e-6);
    assert!(h1.max_abs_diff(&h2).unwrap() < 1e-6);
}

#[test]
fn hessian_of_tanh_mlp_is_symmetric() {
    let mut rng = Rng::new(8);
    let m = Model::new(ModelSpec::mlp(vec![3, 4, 1], Activation::Tanh, LossKind::Mse)).unwrap();
    let d = random_regression(&mut rng, 20, 3, 1);
    let w = m.init_params(&mut rng);
    let h = m.hessian_fd(&w, &d, DEFAULT_HESSIAN_CAP).unwrap();
    assert!(h.asymmetry() < 1e-6);
    assert_eq!(h.asymmetry(), 0.0);
}

#[test]
fn hessian_respects_cap() {
    let m = Model::new(ModelSpec::mlp(vec![3, 4, 1], Activation::Tanh, LossKind::Mse)).unwrap();
    let d = random_regression(&mut Rng::new(9), 4, 3, 1);
    let w = vec![0.1; m.dim()];
    assert!(matches!(m.hessian_fd(&w, &d, 10), Err(Error::Size { d: 21, cap: 10 })));
}

fn quadratic_fixture(seed: u64) -> (Model, Dataset, DenseMatrix, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let x: Vec<Vec<f64>> = (0..6).map(|_| rng.normals(4)).collect();
    let w_star = rng.normals(4);
    let xm = DenseMatrix::from_rows(&x).unwrap();
    let y = xm.matvec(&w_star).unwrap();
    let d = lr_data(x, y);
    let m = Model::new(ModelSpec::linear_regression(4, 1)).unwrap();
    let h = xm.transpose().matmul(&xm).unwrap().scale(1.0 / 6.0);
    (m, d, h, w_star)
}

#[test]
fn gradient_flow_matches_matrix_exponential() {
    let (m, d, h, w_star) = quadratic_fixture(10);
    let w0 = vec![0.5, -1.0, 2.0, 0.0];
    let traj = gradient_flow(&m, &w0, &d, 1.0, 1e-3).unwrap();
    assert_eq!(traj.states.len(), 1001);
    assert_eq!(*traj.times.last().unwrap(), 1.0);
    let e = matrix_exp_scaled(&h, 1.0).unwrap();
    let closed: Vec<f64> = e
        .matvec(&sub(&w0, &w_star))
        .unwrap()
        .iter()
        .zip(&w_star)
        .map(|(a, b)| a + b)
        .collect();
    assert!(crate::linalg::max_abs_diff(traj.last(), &closed) < 1e-6);
}

#[test]
fn gradient_flow_fixed_point_and_richardson() {
    let (m, d, _, w_star) = quadratic_fixture(11);
    let traj = gradient_flow(&m, &w_star, &d, 0.5, 0.01).unwrap();
    for s in &traj.states {
        assert!(crate::linalg::max_abs_diff(s, &w_star) < 1e-13);
    }

    let w0 = vec![1.0, 1.0, -1.0, 0.5];
    let end = |dt| gradient_flow(&m, &w0, &d, 1.0, dt).unwrap().last().clone();
    let (a, b, c) = (end(0.1), end(0.05), end(0.025));
    let e1 = norm(&sub(&a, &b));
    let e2 = norm(&sub(&b, &c));
    let ratio = e1 / e2;
    assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
}

#[test]
fn gradient_flow_rejects_bad_steps_and_divergence() {
    let (m, d, _, _) = quadratic_fixture(12);
    assert!(gradient_flow(&m, &[0.0; 4], &d, 1.0, 0.0).is_err());
    assert!(gradient_flow(&m, &[0.0; 4], &d, -1.0, 0.1).is_err());
    let empty = gradient_flow(&m, &[0.0; 4], &d, 0.0, 0.1).unwrap();
    assert_eq!(empty.states.len(), 1);

    // huge step on a steep quadratic blows up
    let steep = lr_data(vec![vec![1e3]], vec![0.0]);
    let m1 = Model::new(ModelSpec::linear_regression(1, 1)).unwrap();
    let err = gradient_flow(&m1, &[1.0], &steep, 1000.0, 1.0).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn teacher_student_examples() {
    let ts = make_teacher_student(3, 4, 6, 50, 0.0).unwrap();
    let student = Model::new(ts.spec.clone()).unwrap();
    assert_eq!(student.full_loss(&ts.teacher, &ts.dataset).unwrap(), 0.0);
    let again = make_teacher_student(3, 4, 6, 50, 0.0).unwrap();
    assert_eq!(again.dataset, ts.dataset);

    let noisy = make_teacher_student(4, 3, 5, 1000, 0.1).unwrap();
    let clean = make_teacher_student(4, 3, 5, 1000, 0.0).unwrap();
    let var = |d: &Dataset| {
        let Targets::Values(y) = &d.targets else { unreachable!() };
        let v = y.as_slice();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
    };
    let expected = var(&clean.dataset) + 0.01;
    assert!((var(&noisy.dataset) - expected).abs() < 0.2 * expected);
}

#[test]
fn two_moons_shape() {
    let d = two_moons(1, 101, 0.1).unwrap();
    assert_eq!(d.len(), 101);
    assert_eq!(d.in_dim(), 2);
    let Targets::Classes { labels, n_classes } = &d.targets else { unreachable!() };
    assert_eq!(*n_classes, 2);
    assert_eq!(labels.iter().filter(|&&c| c == 1).count(), 51);
    assert_eq!(two_moons(1, 101, 0.1).unwrap(), d);
}

#[test]
fn flat_regression_spectrum() {
    let f = flat_linear_regression(5, 10, 10, 10, (1.0, 4.0)).unwrap();
    let m = Model::new(f.spec.clone()).unwrap();
    assert!(m.full_loss(&f.w_star, &f.dataset).unwrap() < 1e-25);
    let x = &f.dataset.inputs;
    let h = x.transpose().matmul(x).unwrap().scale(0.1);
    let eig = crate::linalg::sym_eigen(&h).unwrap();
    let nonzero: Vec<f64> = eig.eigenvalues.iter().cloned().filter(|l| l.abs() > 1e-9).collect();
    assert_eq!(nonzero.len(), 10);
    assert!((nonzero[0] - 1.0).abs() < 1e-9 && (nonzero[9] - 4.0).abs() < 1e-9);
    for i in 0..20 {
        for j in 10..20 {
            assert_eq!(h[(i, j)], 0.0);
        }
    }
}

#[test]
fn idx_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    let lab = dir.path().join("lab");
    write_idx_images(&img, 2, 2, &[vec![0, 255, 51, 102], vec![1, 2, 3, 4]]).unwrap();
    write_idx_labels(&lab, &[7, 1]).unwrap();
    let d = load_idx(&img, &lab, None).unwrap();
    assert_eq!((d.len(), d.in_dim()), (2, 4));
    assert_eq!(d.inputs[(0, 1)], 1.0);
    assert_eq!(d.inputs[(0, 2)], 0.2);
    assert_eq!(load_idx(&img, &lab, Some(1)).unwrap().len(), 1);

    let mut bytes = std::fs::read(&img).unwrap();
    bytes[3] = 0x04;
    std::fs::write(&img, &bytes).unwrap();
    let err = load_idx(&img, &lab, None).unwrap_err().to_string();
    assert!(err.contains("2052"), "{err}");

    write_idx_images(&img, 2, 2, &[vec![0; 4], vec![0; 4]]).unwrap();
    let mut short = std::fs::read(&img).unwrap();
    short.pop();
    std::fs::write(&img, &short).unwrap();
    assert!(load_idx(&img, &lab, None).is_err());

    write_idx_images(&img, 2, 2, &[vec![0; 4]]).unwrap();
    assert!(load_idx(&img, &lab, None).is_err());
}

#[test]
fn csv_loading() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "# comment\nx1,x2,y\n1,2,0\n3,4,1\n").unwrap();
    let d = load_csv(&p, true).unwrap();
    assert_eq!((d.len(), d.in_dim(), d.out_dim()), (2, 2, 2));
    let r = load_csv(&p, false).unwrap();
    assert_eq!(r.out_dim(), 1);
    std::fs::write(&p, "x,y\n1,abc\n").unwrap();
    assert!(matches!(load_csv(&p, false), Err(Error::Format { .. })));
    std::fs::write(&p, "x,y\n1,0.5\n").unwrap();
    assert!(load_csv(&p, true).is_err());
}

fn arch() -> impl Strategy<Value = (ModelKind, Activation, LossKind, Vec<usize>)> {
    prop_oneof![
        (1usize..5, 1usize..3).prop_map(|(i, o)| (ModelKind::LinearRegression, Activation::Identity, LossKind::Mse, vec![i, o])),
        (1usize..5).prop_map(|d| (ModelKind::Quadratic, Activation::Identity, LossKind::Mse, vec![d, 1])),
        (1usize..4, 1usize..6, 1usize..4, prop_oneof![Just(Activation::Tanh), Just(Activation::Relu), Just(Activation::Identity)])
            .prop_map(|(i, h, o, a)| (ModelKind::Mlp, a, LossKind::Mse, vec![i, h, o])),
        (1usize..4, 1usize..5, 1usize..4, 2usize..4, prop_oneof![Just(Activation::Tanh), Just(Activation::Relu)])
            .prop_map(|(i, h1, h2, k, a)| (ModelKind::Mlp, a, LossKind::SoftmaxCrossEntropy, vec![i, h1, h2, k])),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_finite_differences(spec in arch(), seed in any::<u64>()) {
        let (kind, act, loss, sizes) = spec;
        let mut rng = Rng::new(seed);
        let n = 12;
        let (model, data) = match kind {
            ModelKind::Quadratic => {
                let x: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(sizes[0])).collect();
                let m = Model::new(ModelSpec::quadratic(x, rng.normals(n))).unwrap();
                (m, lr_data(vec![vec![0.0]], vec![0.0]))
            }
            _ => {
                let spec = ModelSpec { kind, layer_sizes: sizes.clone(), activation: act, loss, quadratic_data: None };
                let m = Model::new(spec).unwrap();
                let last = *sizes.last().unwrap();
                let d = if loss == LossKind::Mse {
                    random_regression(&mut rng, n, sizes[0], last)
                } else {
                    random_classes(&mut rng, n, sizes[0], last)
                };
                (m, d)
            }
        };
        let batch = random_batch(&mut rng, n);
        let w = model.init_params(&mut rng).into_inner();
        let w: Vec<f64> = w.iter().map(|x| x + 0.3 * rng.normal()).collect();
        prop_assume!(model.min_abs_preactivation(&w, &data, &batch).unwrap() > 1e-3);
        let g = model.grad(&w, &data, &batch).unwrap();
        let fd = fd_gradient(&model, &w, &data, &batch);
        let err = rel_err(&g, &fd);
        prop_assert!(err <= 1e-4 || norm(&fd) < 1e-8, "relative error {}", err);
    }
}
