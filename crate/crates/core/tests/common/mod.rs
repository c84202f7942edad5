#![allow(dead_code)]

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxkernel::featio::{ImageFeatures, LabelMatrix};
use ctxkernel::grid::{AdjacencySet, GridSpec, Support};
use ctxkernel::kernelcore::ContextStack;
use ctxkernel::svm::SvmModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_spec(rng: &mut ChaCha8Rng, max_side: usize) -> GridSpec {
    let rows = rng.random_range(1..=max_side);
    let cols = rng.random_range(1..=max_side);
    let radius = rng.random_range(1..=2);
    let sectors = [1, 2, 4, 4, 8][rng.random_range(0..5)];
    GridSpec::new(rows, cols, radius, sectors).unwrap()
}

/// Sign-unconstrained context with every masked weight drawn from `[-1, 1]`.
pub fn random_context(rng: &mut ChaCha8Rng, spec: &GridSpec, depth: usize, gamma: f64) -> ContextStack {
    let support = Arc::new(Support::new(*spec).unwrap());
    let layers = (0..depth)
        .map(|_| {
            let mut layer = AdjacencySet::zeros(Arc::clone(&support));
            let values: Vec<f64> = (0..support.edge_count())
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect();
            layer.set_masked_values(&values).unwrap();
            layer
        })
        .collect();
    ContextStack::new(layers, gamma).unwrap()
}

pub fn random_images(rng: &mut ChaCha8Rng, n_images: usize, cells: usize, d0: usize) -> Vec<ImageFeatures> {
    (0..n_images)
        .map(|p| {
            let v = Array2::from_shape_fn((cells, d0), |_| rng.random_range(0.0..1.0));
            ImageFeatures::new(format!("img{p}"), v).unwrap()
        })
        .collect()
}

/// Labels with both signs in every concept.
pub fn random_labels(rng: &mut ChaCha8Rng, n_images: usize, n_concepts: usize) -> LabelMatrix {
    let mut entries = Array2::<i8>::zeros((n_images, n_concepts));
    for k in 0..n_concepts {
        for p in 0..n_images {
            entries[[p, k]] = if rng.random_bool(0.5) { 1 } else { -1 };
        }
        entries[[0, k]] = 1;
        entries[[1, k]] = -1;
    }
    LabelMatrix::new(
        (0..n_images).map(|p| format!("img{p}")).collect(),
        (0..n_concepts).map(|k| format!("c{k}")).collect(),
        entries,
    )
    .unwrap()
}

pub fn random_model(rng: &mut ChaCha8Rng, dim: usize, n_concepts: usize, scale: f64) -> SvmModel {
    SvmModel {
        weights: (0..n_concepts)
            .map(|_| Array1::from_shape_fn(dim, |_| rng.random_range(-scale..=scale)))
            .collect(),
        costs: (0..n_concepts).map(|_| rng.random_range(0.5..2.0)).collect(),
        concept_names: (0..n_concepts).map(|k| format!("c{k}")).collect(),
        bias_feature: false,
    }
}

/// `max |a - b| / max(1, max |b|)`.
pub fn max_rel_dev(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Image-level gram from the cell-level recursion: sum of each `n x n` block.
pub fn pooled_from_cell_gram(k: &Array2<f64>, n_images: usize, cells: usize) -> Array2<f64> {
    Array2::from_shape_fn((n_images, n_images), |(p, q)| {
        let mut s = 0.0;
        for i in 0..cells {
            for j in 0..cells {
                s += k[[p * cells + i, q * cells + j]];
            }
        }
        s
    })
}
