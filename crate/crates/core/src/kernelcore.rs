//! Forward engine: layered explicit kernel maps, sum pooling, and the gram
//! recursion used to cross-check them.
//!
//! Layer `t + 1` of a cell's map is the cell's own initial map followed by
//! one block per sector holding `sqrt(gamma) * sum_x' P_c[x, x'] * map_t(x')`.
//! Inner products of these maps reproduce `K_{t+1} = S + gamma * sum_c P_c K_t P_c'`
//! exactly, so the gram recursion is only ever evaluated as an oracle.

use std::sync::{Arc, OnceLock};

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featio::ImageFeatures;
use crate::grid::{handcrafted, AdjacencySet, GridSpec, Support};

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_DEPTH: usize = 3;

pub type Fingerprint = [u8; 32];

/// Per-layer sector adjacency weights plus the context mixing ratio `gamma`.
#[derive(Debug, Clone)]
pub struct ContextStack {
    layers: Vec<AdjacencySet>,
    gamma: f64,
    fingerprint: OnceLock<Fingerprint>,
}

impl PartialEq for ContextStack {
    fn eq(&self, other: &Self) -> bool {
        self.gamma.to_bits() == other.gamma.to_bits() && self.layers == other.layers
    }
}

impl ContextStack {
    pub fn new(layers: Vec<AdjacencySet>, gamma: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("context depth must be >= 1".into()));
        }
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::OutOfRange(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        let support = layers[0].support();
        if layers
            .iter()
            .any(|l| !Arc::ptr_eq(l.support(), support) && l.support() != support)
        {
            return Err(Error::ShapeMismatch("layers disagree on the neighborhood mask".into()));
        }
        Ok(ContextStack {
            layers,
            gamma,
            fingerprint: OnceLock::new(),
        })
    }

    /// `depth` copies of the handcrafted adjacency of `spec`.
    pub fn handcrafted(spec: &GridSpec, depth: usize, gamma: f64) -> Result<Self> {
        let support = Arc::new(Support::new(*spec)?);
        let layer = handcrafted(support);
        ContextStack::new(vec![layer; depth], gamma)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cells(&self) -> usize {
        self.layers[0].cells()
    }

    pub fn sectors(&self) -> usize {
        self.layers[0].sectors()
    }

    pub fn support(&self) -> &Arc<Support> {
        self.layers[0].support()
    }

    pub fn grid(&self) -> &GridSpec {
        self.support().spec()
    }

    pub fn layer(&self, t: usize) -> &AdjacencySet {
        &self.layers[t]
    }

    pub fn layers(&self) -> &[AdjacencySet] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates the cached fingerprint.
    pub fn layers_mut(&mut self) -> &mut [AdjacencySet] {
        self.fingerprint = OnceLock::new();
        &mut self.layers
    }

    /// SHA-256 over gamma, grid geometry and every masked weight.
    pub fn fingerprint(&self) -> Fingerprint {
        *self.fingerprint.get_or_init(|| {
            let mut h = Sha256::new();
            let g = self.grid();
            for v in [g.rows, g.cols, g.radius, g.sectors, self.depth()] {
                h.update((v as u64).to_le_bytes());
            }
            h.update(self.gamma.to_le_bytes());
            for layer in &self.layers {
                for w in layer.masked_values() {
                    h.update(w.to_le_bytes());
                }
            }
            h.finalize().into()
        })
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.masked_values().iter().all(|v| v.is_finite()))
    }

    /// `gamma * max_t sum_c ||P_c||_1 ||P_c||_inf`, an upper bound on the
    /// growth factor of the gram recursion; values below 1 guarantee contraction.
    pub fn contraction_bound(&self) -> f64 {
        let worst = self
            .layers
            .iter()
            .map(|layer| {
                (0..layer.sectors())
                    .map(|c| {
                        let m = layer.matrix(c).mapv(f64::abs);
                        let col = m.sum_axis(Axis(0)).fold(0.0f64, |a, &b| a.max(b));
                        let row = m.sum_axis(Axis(1)).fold(0.0f64, |a, &b| a.max(b));
                        col * row
                    })
                    .sum::<f64>()
            })
            .fold(0.0f64, f64::max);
        self.gamma * worst
    }

    pub fn warn_if_not_contractive(&self) {
        let bound = self.contraction_bound();
        if bound >= 1.0 {
            log::warn!("context growth bound {bound:.3} >= 1: the gram recursion is not provably contractive");
        }
    }
}

/// Map dimension at layer `t`: `D_0 = d0`, `D_{t+1} = d0 + sectors * D_t`.
pub fn map_dim(d0: usize, sectors: usize, t: usize) -> usize {
    (0..t).fold(d0, |d, _| d0 + sectors * d)
}

/// Cell maps of one image, plus the sum-pooled top layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStack {
    /// `layers[t]` is `n x D_t`. Only the top layer is kept in inference mode.
    pub layers: Vec<Array2<f64>>,
    pub pooled: Array1<f64>,
    pub context: Fingerprint,
}

impl MapStack {
    pub fn top(&self) -> &Array2<f64> {
        self.layers.last().expect("map stack has at least one layer")
    }

    pub fn retains_all_layers(&self, depth: usize) -> bool {
        self.layers.len() == depth + 1
    }
}

fn check_image(img: &ImageFeatures, ctx: &ContextStack) -> Result<()> {
    if img.n_cells() != ctx.cells() {
        return Err(Error::ShapeMismatch(format!(
            "image `{}` has {} cells, context expects {}",
            img.image_id,
            img.n_cells(),
            ctx.cells()
        )));
    }
    Ok(())
}

fn propagate(base: &Array2<f64>, prev: &Array2<f64>, layer: &AdjacencySet, scale: f64) -> Array2<f64> {
    let n = base.nrows();
    let d0 = base.ncols();
    let dp = prev.ncols();
    let sectors = layer.sectors();
    let mut out = Array2::zeros((n, d0 + sectors * dp));
    out.slice_mut(s![.., ..d0]).assign(base);
    if scale == 0.0 {
        return out;
    }
    for c in 0..sectors {
        let off = d0 + c * dp;
        for (x, x2, w) in layer.weighted_edges(c) {
            out.slice_mut(s![x, off..off + dp]).scaled_add(scale * w, &prev.row(x2));
        }
    }
    out
}

fn forward_impl(img: &ImageFeatures, ctx: &ContextStack, retain: bool, fp: Fingerprint) -> Result<MapStack> {
    check_image(img, ctx)?;
    let scale = ctx.gamma().sqrt();
    let mut layers = vec![img.cells.clone()];
    for t in 0..ctx.depth() {
        let next = propagate(&img.cells, layers.last().unwrap(), ctx.layer(t), scale);
        if !retain {
            layers.clear();
        }
        layers.push(next);
    }
    let pooled = layers.last().unwrap().sum_axis(Axis(0));
    Ok(MapStack {
        layers,
        pooled,
        context: fp,
    })
}

/// All layers of the explicit map for one image. Touches no other image.
pub fn forward_map(img: &ImageFeatures, ctx: &ContextStack) -> Result<MapStack> {
    forward_impl(img, ctx, true, ctx.fingerprint())
}

/// Pooled map only (inference mode).
pub fn pooled_map(img: &ImageFeatures, ctx: &ContextStack) -> Result<Array1<f64>> {
    Ok(forward_impl(img, ctx, false, ctx.fingerprint())?.pooled)
}

/// [`forward_map`] over a batch, in parallel; output order follows `images`.
pub fn forward_batch(images: &[ImageFeatures], ctx: &ContextStack) -> Result<Vec<MapStack>> {
    let fp = ctx.fingerprint();
    images.par_iter().map(|img| forward_impl(img, ctx, true, fp)).collect()
}

/// [`pooled_map`] over a batch, in parallel.
pub fn pooled_batch(images: &[ImageFeatures], ctx: &ContextStack) -> Result<Vec<Array1<f64>>> {
    let fp = ctx.fingerprint();
    images
        .par_iter()
        .map(|img| forward_impl(img, ctx, false, fp).map(|m| m.pooled))
        .collect()
}

/// Image-level convolution kernel: inner product of the pooled maps.
pub fn convolution_kernel(a: &MapStack, b: &MapStack) -> Result<f64> {
    if a.pooled.len() != b.pooled.len() {
        return Err(Error::ShapeMismatch(format!(
            "pooled dimensions differ: {} vs {}",
            a.pooled.len(),
            b.pooled.len()
        )));
    }
    Ok(a.pooled.dot(&b.pooled))
}

/// Context-free cell gram `S = V V'` over all cells of `images`, in image order.
pub fn base_gram(images: &[ImageFeatures]) -> Array2<f64> {
    let n_total: usize = images.iter().map(|im| im.n_cells()).sum();
    let dim = images.first().map_or(0, |im| im.dim());
    let mut v = Array2::zeros((n_total, dim));
    let mut row = 0;
    for im in images {
        v.slice_mut(s![row..row + im.n_cells(), ..]).assign(&im.cells);
        row += im.n_cells();
    }
    v.dot(&v.t())
}

/// Gram of every cell's top-layer map, in image order.
pub fn map_gram(stacks: &[MapStack]) -> Array2<f64> {
    let n_total: usize = stacks.iter().map(|m| m.top().nrows()).sum();
    let dim = stacks.first().map_or(0, |m| m.top().ncols());
    let mut phi = Array2::zeros((n_total, dim));
    let mut row = 0;
    for m in stacks {
        let top = m.top();
        phi.slice_mut(s![row..row + top.nrows(), ..]).assign(top);
        row += top.nrows();
    }
    phi.dot(&phi.t())
}

/// `T` steps of `K <- S + gamma * sum_c P_c K P_c'` starting from `K = S`,
/// with each layer's `P_c` applied block-diagonally over `n_images` images.
pub fn gram_fixed_point(s: &Array2<f64>, ctx: &ContextStack, n_images: usize) -> Result<Array2<f64>> {
    let n = ctx.cells();
    let n_total = n * n_images;
    if s.dim() != (n_total, n_total) {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix is {:?}, expected {n_total}x{n_total} ({n_images} images of {n} cells)",
            s.dim()
        )));
    }
    let scale = s.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let asym = s
        .indexed_iter()
        .map(|((i, j), &v)| (v - s[[j, i]]).abs())
        .fold(0.0f64, f64::max);
    if asym > 1e-10 * scale {
        return Err(Error::Asymmetric(asym));
    }

    let mut k = s.clone();
    for layer in ctx.layers() {
        let mut next = s.clone();
        for p in 0..n_images {
            for q in 0..n_images {
                let block = k.slice(s![p * n..(p + 1) * n, q * n..(q + 1) * n]);
                let mut acc = Array2::<f64>::zeros((n, n));
                for c in 0..layer.sectors() {
                    let pm = layer.matrix(c);
                    acc += &pm.dot(&block).dot(&pm.t());
                }
                next.slice_mut(s![p * n..(p + 1) * n, q * n..(q + 1) * n])
                    .scaled_add(ctx.gamma(), &acc);
            }
        }
        k = next;
    }
    Ok(k)
}
