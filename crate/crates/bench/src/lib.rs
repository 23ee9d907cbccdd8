//! Fixtures shared by the benchmarks.

use sdprune_core::grouping::make_partition;
use sdprune_core::linalg::Rng;
use sdprune_core::model::{flat_linear_regression, two_moons, Activation, LossKind};
use sdprune_core::{Dataset, DenseMatrix, GroupPartition, GroupingStrategy, Model, ModelSpec, ParamVector};

pub struct Fixture {
    pub model: Model,
    pub data: Dataset,
    pub partition: GroupPartition,
    pub w: ParamVector,
}

/// Two-moons MLP `[2, hidden, 2]` with one group per output unit.
pub fn moons(hidden: usize, n: usize) -> Fixture {
    let model = Model::new(ModelSpec::mlp(vec![2, hidden, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy))
        .expect("valid spec");
    let partition = make_partition(model.layout(), &GroupingStrategy::PerOutputUnit).expect("mlp layout");
    let w = model.init_params(&mut Rng::new(1));
    Fixture { data: two_moons(1, n, 0.1).expect("valid generator"), model, partition, w }
}

/// Flat regression with `d_active + d_flat` parameters in groups of five.
pub fn flat(d_active: usize, d_flat: usize) -> Fixture {
    let fx = flat_linear_regression(1, d_active, d_active, d_flat, (1.0, 4.0)).expect("valid generator");
    let d = d_active + d_flat;
    let sizes: Vec<usize> = (0..d).step_by(5).map(|i| 5.min(d - i)).collect();
    Fixture {
        model: Model::new(fx.spec).expect("valid spec"),
        data: fx.dataset,
        partition: GroupPartition::contiguous(&sizes).expect("covers 0..d"),
        w: ParamVector::new(Rng::new(2).normals(d)),
    }
}

pub fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
    let mut rng = Rng::new(seed);
    let a = DenseMatrix::from_fn(n, n, |_, _| rng.normal());
    a.add(&a.transpose()).expect("square").scale(0.5)
}
