#![allow(dead_code)]

use smoe_prune::evaluation::{make_task, Task, TaskKind};
use smoe_prune::model::{ModelConfig, SMoEModel};
use smoe_prune::tensor::Matrix;

/// Small model shared by the certification tests: L=2, E=4, k=2.
pub fn cert_config() -> ModelConfig {
    ModelConfig::tiny()
}

pub fn cert_model(seed: u64) -> SMoEModel {
    SMoEModel::random(&cert_config(), seed).unwrap()
}

pub fn cert_task(model: &SMoEModel, seed: u64) -> Task {
    make_task(model, TaskKind::TeacherLabelAccuracy, 64, 8, seed).unwrap()
}

/// Builds the pruned model by hand: keep the listed experts and the matching
/// router columns, no mapping matrix.
pub fn literal_subset_model(model: &SMoEModel, subsets: &[Vec<usize>]) -> SMoEModel {
    assert_eq!(subsets.len(), model.blocks.len());
    let mut out = model.clone();
    for (block, keep) in out.blocks.iter_mut().zip(subsets) {
        let d = block.w_router.rows();
        let mut router = Matrix::zeros(d, keep.len());
        for r in 0..d {
            for (j, &i) in keep.iter().enumerate() {
                router.set(r, j, block.w_router.get(r, i));
            }
        }
        block.w_router = router;
        block.experts = keep.iter().map(|&i| block.experts[i].clone()).collect();
        block.router_map = None;
    }
    out.config.n_experts = subsets[0].len();
    out
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
