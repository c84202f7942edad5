//! Context learning: backpropagation of the SVM hinge objective through the
//! map layers to the adjacency weights, and the alternating optimization of
//! SVM weights and context.

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featio::{ImageFeatures, LabelMatrix};
use crate::grid::GridSpec;
use crate::kernelcore::{forward_batch, ContextStack, MapStack};
use crate::svm::{self, SvmModel, SvmOptions};

pub const DEFAULT_ETA: f64 = 1e-3;
pub const DEFAULT_INNER_STEPS: usize = 10;
pub const DEFAULT_MAX_OUTER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const MAX_HALVINGS: usize = 10;

/// `dE/dP_c^(t)` with the shape and mask of a [`ContextStack`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContextGradient {
    /// `values[t]` lists the gradient of every masked entry of layer `t` in
    /// canonical order (sector, then row-major).
    values: Vec<Vec<f64>>,
    ctx_template: ContextStack,
}

impl ContextGradient {
    fn zeros(ctx: &ContextStack) -> Self {
        let m = ctx.support().edge_count();
        ContextGradient {
            values: vec![vec![0.0; m]; ctx.depth()],
            ctx_template: ctx.clone(),
        }
    }

    pub fn depth(&self) -> usize {
        self.values.len()
    }

    /// Masked gradient entries of layer `t`, in canonical order.
    pub fn masked_values(&self, t: usize) -> &[f64] {
        &self.values[t]
    }

    /// Dense `n x n` gradient of layer `t`, sector `c`; zero off the mask.
    pub fn matrix(&self, t: usize, c: usize) -> Array2<f64> {
        let support = self.ctx_template.support();
        let n = support.cells();
        let mut m = Array2::zeros((n, n));
        let offset: usize = (0..c).map(|cc| support.edges(cc).len()).sum();
        for (i, &(x, x2)) in support.edges(c).iter().enumerate() {
            m[[x, x2]] = self.values[t][offset + i];
        }
        m
    }

    pub fn get(&self, t: usize, c: usize, x: usize, x2: usize) -> f64 {
        self.matrix(t, c)[[x, x2]]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    /// `ctx - step * self`, applied to masked entries only.
    pub fn descend(&self, ctx: &ContextStack, step: f64) -> Result<ContextStack> {
        let mut next = ctx.clone();
        for (t, layer) in next.layers_mut().iter_mut().enumerate() {
            let updated: Vec<f64> = layer
                .masked_values()
                .iter()
                .zip(&self.values[t])
                .map(|(p, g)| p - step * g)
                .collect();
            layer.set_masked_values(&updated)?;
        }
        Ok(next)
    }
}

/// Objective value and per-image gradient with respect to the pooled maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLoss {
    /// `sum_k 0.5 |w_k|^2 + C_k sum_p hinge`.
    pub objective: f64,
    /// Unweighted hinge sum over all concepts and images.
    pub hinge_sum: f64,
    pub grads: Vec<Array1<f64>>,
}

/// `E` at fixed SVM weights, and `dE/dphi_p = -sum_k C_k y_kp w_k [1 - y_kp f_k(p) > 0]`.
/// The regularizer enters `E` but not the gradient.
pub fn loss_and_grad_pooled(model: &SvmModel, pooled: &[Array1<f64>], labels: &LabelMatrix) -> Result<PooledLoss> {
    if pooled.len() != labels.n_images() {
        return Err(Error::ShapeMismatch(format!(
            "{} pooled maps but {} labelled images",
            pooled.len(),
            labels.n_images()
        )));
    }
    if labels.n_concepts() != model.n_concepts() {
        return Err(Error::ShapeMismatch(format!(
            "{} label concepts but model has {}",
            labels.n_concepts(),
            model.n_concepts()
        )));
    }
    let d = model.dim();
    let mut objective: f64 = model.weights.iter().map(|w| 0.5 * w.dot(w)).sum();
    let mut hinge_sum = 0.0;
    let mut grads = Vec::with_capacity(pooled.len());
    for (p, phi) in pooled.iter().enumerate() {
        let scores = svm::score(model, phi)?;
        let mut g = Array1::zeros(d);
        for (k, score) in scores.iter().enumerate() {
            let y = labels.get(p, k);
            let violation = 1.0 - y * score;
            if violation > 0.0 {
                hinge_sum += violation;
                objective += model.costs[k] * violation;
                g.scaled_add(-model.costs[k] * y, &model.map_weights(k));
            }
        }
        grads.push(g);
    }
    Ok(PooledLoss {
        objective,
        hinge_sum,
        grads,
    })
}

fn backward_image(stack: &MapStack, ctx: &ContextStack, grad: &Array1<f64>) -> Vec<Vec<f64>> {
    let depth = ctx.depth();
    let n = ctx.cells();
    let scale = ctx.gamma().sqrt();
    let d0 = stack.layers[0].ncols();
    let support = ctx.support();
    let mut out = vec![vec![0.0; support.edge_count()]; depth];
    if scale == 0.0 {
        return out;
    }

    // sum pooling hands the pooled gradient to every cell unchanged
    let mut g = Array2::zeros((n, grad.len()));
    for mut row in g.rows_mut() {
        row.assign(grad);
    }
    for t in (1..=depth).rev() {
        let layer = ctx.layer(t - 1);
        let prev = &stack.layers[t - 1];
        let dp = prev.ncols();
        let mut g_prev = Array2::zeros((n, dp));
        let mut edge = 0;
        for c in 0..ctx.sectors() {
            let off = d0 + c * dp;
            for (x, x2, w) in layer.weighted_edges(c) {
                let gc = g.slice(s![x, off..off + dp]);
                out[t - 1][edge] += scale * gc.dot(&prev.row(x2));
                g_prev.row_mut(x2).scaled_add(scale * w, &gc);
                edge += 1;
            }
        }
        g = g_prev;
    }
    out
}

/// Chain rule from pooled-map gradients down to every masked adjacency
/// entry, accumulated over images in index order.
pub fn backward_context(stacks: &[MapStack], ctx: &ContextStack, grads: &[Array1<f64>]) -> Result<ContextGradient> {
    if stacks.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} map stacks but {} gradients",
            stacks.len(),
            grads.len()
        )));
    }
    let fp = ctx.fingerprint();
    for (stack, g) in stacks.iter().zip(grads) {
        if stack.context != fp {
            return Err(Error::StaleStack);
        }
        if !stack.retains_all_layers(ctx.depth()) {
            return Err(Error::InvalidArgument(
                "backward pass needs every layer of the forward maps".into(),
            ));
        }
        if g.len() != stack.pooled.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient dimension {} vs pooled dimension {}",
                g.len(),
                stack.pooled.len()
            )));
        }
    }
    let per_image: Vec<Vec<Vec<f64>>> = stacks
        .par_iter()
        .zip(grads.par_iter())
        .map(|(stack, g)| backward_image(stack, ctx, g))
        .collect();
    let mut total = ContextGradient::zeros(ctx);
    for img in &per_image {
        for (acc, layer) in total.values.iter_mut().zip(img) {
            for (a, v) in acc.iter_mut().zip(layer) {
                *a += v;
            }
        }
    }
    Ok(total)
}

/// Knobs of the alternating optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub gamma: f64,
    pub depth: usize,
    /// One cost per concept.
    pub costs: Vec<f64>,
    pub svm: SvmOptions,
    pub eta: f64,
    pub inner_steps: usize,
    pub max_outer: usize,
    pub tol: f64,
}

impl LearnConfig {
    pub fn with_defaults(n_concepts: usize) -> Self {
        LearnConfig {
            gamma: crate::kernelcore::DEFAULT_GAMMA,
            depth: crate::kernelcore::DEFAULT_DEPTH,
            costs: svm::uniform_costs(svm::DEFAULT_COST, n_concepts),
            svm: SvmOptions::default(),
            eta: DEFAULT_ETA,
            inner_steps: DEFAULT_INNER_STEPS,
            max_outer: DEFAULT_MAX_OUTER,
            tol: DEFAULT_TOL,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::OutOfRange(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::OutOfRange(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_outer == 0 {
            return Err(Error::OutOfRange("max_outer must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub outer_iter: usize,
    /// Objective at the end of the iteration.
    pub objective: f64,
    /// Objective right after the SVM phase.
    pub svm_objective: f64,
    pub hinge_sum: f64,
    pub backtrack_halvings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub ctx: ContextStack,
    pub model: SvmModel,
    pub objective_history: Vec<f64>,
    pub outer_iter: usize,
    pub log: Vec<IterationLog>,
}

fn pooled_of(stacks: &[MapStack]) -> Vec<Array1<f64>> {
    stacks.iter().map(|m| m.pooled.clone()).collect()
}

/// Alternate SVM training and context descent, starting from the
/// handcrafted adjacency of `spec`.
pub fn alternate_optimize(
    features: &[ImageFeatures],
    labels: &LabelMatrix,
    spec: &GridSpec,
    config: &LearnConfig,
) -> Result<TrainState> {
    let ctx = ContextStack::handcrafted(spec, config.depth, config.gamma)?;
    alternate_optimize_from(features, labels, ctx, None, config)
}

/// As [`alternate_optimize`], from an explicit context, optionally resuming a
/// previous run (its history is extended and `max_outer` counts all
/// iterations).
pub fn alternate_optimize_from(
    features: &[ImageFeatures],
    labels: &LabelMatrix,
    ctx: ContextStack,
    resume: Option<TrainState>,
    config: &LearnConfig,
) -> Result<TrainState> {
    config.validate()?;
    if features.len() != labels.n_images() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labelled images",
            features.len(),
            labels.n_images()
        )));
    }
    ctx.warn_if_not_contractive();

    let (mut ctx, mut prev_model, mut history, mut log, start) = match resume {
        Some(state) => (
            state.ctx,
            Some(state.model),
            state.objective_history,
            state.log,
            state.outer_iter,
        ),
        None => (ctx, None, Vec::new(), Vec::new(), 0),
    };
    let mut last_good: Option<TrainState> = None;

    for outer in start + 1..=config.max_outer {
        let mut stacks = forward_batch(features, &ctx)?;
        let pooled = pooled_of(&stacks);

        // w-phase
        let mut model = svm::train(&pooled, labels, &config.costs, &config.svm)?;
        let mut loss = loss_and_grad_pooled(&model, &pooled, labels)?;
        if let Some(prev) = prev_model.take().filter(|m| m.dim() == model.dim()) {
            // keep the previous weights if the inexact re-solve did not improve on them
            let prev_loss = loss_and_grad_pooled(&prev, &pooled, labels)?;
            if prev_loss.objective < loss.objective {
                model = prev;
                loss = prev_loss;
            }
        }
        let svm_objective = loss.objective;
        let hinge_sum = loss.hinge_sum;
        if !svm_objective.is_finite() {
            return Err(diverged(last_good, ctx, model, history, log, outer));
        }

        // P-phase
        let mut halvings_total = 0;
        for _ in 0..config.inner_steps {
            if config.eta == 0.0 {
                break;
            }
            let grad = backward_context(&stacks, &ctx, &loss.grads)?;
            if grad.is_zero() {
                break;
            }
            if !grad.all_finite() {
                return Err(diverged(last_good, ctx, model, history, log, outer));
            }
            let mut step = config.eta;
            let mut accepted = false;
            for halving in 0..=MAX_HALVINGS {
                let candidate = grad.descend(&ctx, step)?;
                let cand_stacks = forward_batch(features, &candidate)?;
                let cand_pooled = pooled_of(&cand_stacks);
                let cand_loss = loss_and_grad_pooled(&model, &cand_pooled, labels)?;
                if cand_loss.objective.is_finite() && cand_loss.objective < loss.objective {
                    ctx = candidate;
                    stacks = cand_stacks;
                    loss = cand_loss;
                    halvings_total += halving;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                halvings_total += MAX_HALVINGS;
                // the next step would retry the same gradient
                break;
            }
        }

        let objective = loss.objective;
        if !objective.is_finite() {
            return Err(diverged(last_good, ctx, model, history, log, outer));
        }
        let prev_e = history.last().copied();
        history.push(objective);
        log.push(IterationLog {
            outer_iter: outer,
            objective,
            svm_objective,
            hinge_sum,
            backtrack_halvings: halvings_total,
        });
        log::info!("outer {outer}: E = {objective:.9e} (svm phase {svm_objective:.9e}, halvings {halvings_total})");
        let state = TrainState {
            ctx: ctx.clone(),
            model: model.clone(),
            objective_history: history.clone(),
            outer_iter: outer,
            log: log.clone(),
        };
        prev_model = Some(model);

        let converged = prev_e.is_some_and(|p| (p - objective).abs() < config.tol * p.abs());
        if converged || outer == config.max_outer {
            return Ok(state);
        }
        last_good = Some(state);
    }

    // resumed past max_outer: nothing left to do
    let model = match prev_model {
        Some(m) => m,
        None => {
            let pooled = pooled_of(&forward_batch(features, &ctx)?);
            svm::train(&pooled, labels, &config.costs, &config.svm)?
        }
    };
    let outer_iter = log.last().map_or(start, |l| l.outer_iter);
    Ok(TrainState {
        ctx,
        model,
        objective_history: history,
        outer_iter,
        log,
    })
}

fn diverged(
    last_good: Option<TrainState>,
    ctx: ContextStack,
    model: SvmModel,
    history: Vec<f64>,
    log: Vec<IterationLog>,
    outer: usize,
) -> Error {
    let state = last_good.unwrap_or_else(|| TrainState {
        ctx,
        model,
        objective_history: history,
        outer_iter: outer.saturating_sub(1),
        log,
    });
    Error::Diverged { state: Box::new(state) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{LEFT, RIGHT};
    use crate::kernelcore::forward_map;
    use ndarray::array;

    fn one_concept(ys: &[i8]) -> LabelMatrix {
        let entries = Array2::from_shape_fn((ys.len(), 1), |(i, _)| ys[i]);
        LabelMatrix::new(
            (0..ys.len()).map(|i| format!("i{i}")).collect(),
            vec!["c".into()],
            entries,
        )
        .unwrap()
    }

    #[test]
    fn no_violations_gives_zero_gradient() {
        let model = SvmModel {
            weights: vec![array![2.0, 0.0]],
            costs: vec![1.0],
            concept_names: vec!["c".into()],
            bias_feature: false,
        };
        let pooled = vec![array![1.0, 5.0], array![-1.0, 3.0]];
        let labels = one_concept(&[1, -1]);
        let loss = loss_and_grad_pooled(&model, &pooled, &labels).unwrap();
        assert_eq!(loss.objective, 2.0);
        assert!(loss.grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_violation_gradient() {
        let model = SvmModel {
            weights: vec![array![0.5, -1.0]],
            costs: vec![2.0],
            concept_names: vec!["c".into()],
            bias_feature: false,
        };
        let pooled = vec![array![0.1, 0.1]];
        let labels = one_concept(&[1]);
        let loss = loss_and_grad_pooled(&model, &pooled, &labels).unwrap();
        assert_eq!(loss.grads[0], array![-1.0, 2.0]);
    }

    #[test]
    fn zero_pooled_gradient_or_gamma_gives_zero_context_gradient() {
        let spec = GridSpec::new(2, 2, 1, 4).unwrap();
        let img = ImageFeatures::new("a", array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.2, 0.8]]).unwrap();
        for gamma in [1.0, 0.0] {
            let ctx = ContextStack::handcrafted(&spec, 2, gamma).unwrap();
            let m = forward_map(&img, &ctx).unwrap();
            let zero = Array1::zeros(m.pooled.len());
            assert!(backward_context(std::slice::from_ref(&m), &ctx, &[zero])
                .unwrap()
                .is_zero());
        }
        let ctx = ContextStack::handcrafted(&spec, 2, 0.0).unwrap();
        let m = forward_map(&img, &ctx).unwrap();
        let ones = Array1::ones(m.pooled.len());
        assert!(backward_context(std::slice::from_ref(&m), &ctx, &[ones])
            .unwrap()
            .is_zero());
    }

    #[test]
    fn stale_stacks_rejected() {
        let spec = GridSpec::new(1, 2, 1, 4).unwrap();
        let img = ImageFeatures::new("a", array![[1.0], [2.0]]).unwrap();
        let ctx = ContextStack::handcrafted(&spec, 1, 1.0).unwrap();
        let m = forward_map(&img, &ctx).unwrap();
        let mut moved = ctx.clone();
        moved.layers_mut()[0].set(RIGHT, 0, 1, 0.5).unwrap();
        let g = Array1::ones(m.pooled.len());
        assert!(matches!(
            backward_context(std::slice::from_ref(&m), &moved, &[g]),
            Err(Error::StaleStack)
        ));
    }

    #[test]
    fn toy_gradient_matches_hand_derivation() {
        // 1x2 grid, T = 1, gamma = 1: Phi_a = [v_a, 0, P_r v_b, 0, 0],
        // Phi_b = [v_b, P_l v_a, 0, 0, 0]; pooled = [v_a + v_b, P_l v_a, P_r v_b, 0, 0]
        let spec = GridSpec::new(1, 2, 1, 4).unwrap();
        let img = ImageFeatures::new("a", array![[1.0], [2.0]]).unwrap();
        let ctx = ContextStack::handcrafted(&spec, 1, 1.0).unwrap();
        let m = forward_map(&img, &ctx).unwrap();
        let g = array![0.3, -0.7, 1.1, 0.0, 0.0];
        let grad = backward_context(std::slice::from_ref(&m), &ctx, &[g]).unwrap();
        assert!((grad.get(0, LEFT, 1, 0) - (-0.7 * 1.0)).abs() < 1e-15);
        assert!((grad.get(0, RIGHT, 0, 1) - (1.1 * 2.0)).abs() < 1e-15);
        assert_eq!(grad.matrix(0, LEFT)[[0, 1]], 0.0);
    }

    #[test]
    fn zero_eta_keeps_handcrafted_context() {
        let spec = GridSpec::new(2, 2, 1, 4).unwrap();
        let (file, labels) = crate::featio::gen_synthetic(&spec, 8, 3).unwrap();
        let feats = file.mapped(file.mode).unwrap();
        let mut cfg = LearnConfig::with_defaults(2);
        cfg.eta = 0.0;
        cfg.max_outer = 4;
        let state = alternate_optimize(&feats, &labels, &spec, &cfg).unwrap();
        let hand = ContextStack::handcrafted(&spec, cfg.depth, cfg.gamma).unwrap();
        assert_eq!(state.ctx, hand);
    }
}
