//! One-vs-rest linear SVMs over pooled maps, solved in the dual by
//! coordinate descent.
//!
//! Each concept minimizes `0.5 * |w|^2 + C * sum_p max(0, 1 - y_p w'phi_p)`.
//! There is no bias unless `bias_feature` is set, in which case a constant 1
//! is appended to every pooled map and its weight is regularized like the rest.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featio::LabelMatrix;
use crate::kernelcore::Fingerprint;

pub const MODEL_MAGIC: &[u8; 4] = b"CTXM";
pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_COST: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmOptions {
    pub bias_feature: bool,
    /// Stop once `primal - dual <= tol * primal`.
    pub tol: f64,
    pub max_epochs: usize,
}

impl Default for SvmOptions {
    fn default() -> Self {
        SvmOptions {
            bias_feature: false,
            tol: 1e-6,
            max_epochs: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// One vector per concept; length is the pooled dimension, plus one when
    /// `bias_feature` is set.
    pub weights: Vec<Array1<f64>>,
    pub costs: Vec<f64>,
    pub concept_names: Vec<String>,
    pub bias_feature: bool,
}

impl SvmModel {
    pub fn n_concepts(&self) -> usize {
        self.weights.len()
    }

    /// Pooled-map dimension the model scores.
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.len()) - usize::from(self.bias_feature)
    }

    /// The part of `w_k` that multiplies the pooled map.
    pub fn map_weights(&self, k: usize) -> ArrayView1<'_, f64> {
        self.weights[k].slice(s![..self.dim()])
    }

    fn decision(&self, k: usize, pooled: &Array1<f64>) -> f64 {
        let w = &self.weights[k];
        let d = self.dim();
        let mut f = w.slice(s![..d]).dot(pooled);
        if self.bias_feature {
            f += w[d];
        }
        f
    }

    fn check_dim(&self, pooled: &Array1<f64>) -> Result<()> {
        if pooled.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "pooled map has dimension {}, model expects {}",
                pooled.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Per-concept `0.5 |w_k|^2 + C_k sum_p hinge`, and the unweighted hinge sums.
    pub fn objective(&self, pooled: &[Array1<f64>], labels: &LabelMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut obj = Vec::with_capacity(self.n_concepts());
        let mut hinges = Vec::with_capacity(self.n_concepts());
        for k in 0..self.n_concepts() {
            let mut hinge = 0.0;
            for (p, phi) in pooled.iter().enumerate() {
                self.check_dim(phi)?;
                let margin = labels.get(p, k) * self.decision(k, phi);
                hinge += (1.0 - margin).max(0.0);
            }
            let w = &self.weights[k];
            obj.push(0.5 * w.dot(w) + self.costs[k] * hinge);
            hinges.push(hinge);
        }
        Ok((obj, hinges))
    }
}

/// Shared cost `c` for `k` concepts.
pub fn uniform_costs(c: f64, k: usize) -> Vec<f64> {
    vec![c; k]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub epochs: usize,
    pub primal: f64,
    pub dual: f64,
}

/// Dual coordinate descent for one binary problem, visiting examples in
/// index order every epoch. Returns `w` and the final dual variables.
pub fn solve_binary(
    xs: &[Array1<f64>],
    ys: &[f64],
    cost: f64,
    opts: &SvmOptions,
) -> (Array1<f64>, Vec<f64>, SolveStats) {
    let n = xs.len();
    let dim = xs.first().map_or(0, |x| x.len());
    let qd: Vec<f64> = xs.iter().map(|x| x.dot(x)).collect();
    let mut alpha = vec![0.0; n];
    let mut w = Array1::<f64>::zeros(dim);
    let mut stats = SolveStats {
        epochs: 0,
        primal: f64::INFINITY,
        dual: 0.0,
    };

    while stats.epochs < opts.max_epochs {
        for i in 0..n {
            let g = ys[i] * w.dot(&xs[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cost {
                g.max(0.0)
            } else {
                g
            };
            if pg.abs() <= 1e-12 {
                continue;
            }
            let old = alpha[i];
            alpha[i] = if qd[i] > 0.0 {
                (old - g / qd[i]).clamp(0.0, cost)
            } else {
                // zero example: the dual is linear in alpha_i with slope 1
                cost
            };
            let delta = (alpha[i] - old) * ys[i];
            if delta != 0.0 {
                w.scaled_add(delta, &xs[i]);
            }
        }
        stats.epochs += 1;

        let reg = 0.5 * w.dot(&w);
        let hinge: f64 = xs.iter().zip(ys).map(|(x, &y)| (1.0 - y * w.dot(x)).max(0.0)).sum();
        stats.primal = reg + cost * hinge;
        stats.dual = alpha.iter().sum::<f64>() - reg;
        if stats.primal - stats.dual <= opts.tol * stats.primal.abs() {
            break;
        }
    }
    (w, alpha, stats)
}

fn augment(pooled: &[Array1<f64>], bias: bool) -> Vec<Array1<f64>> {
    if !bias {
        return pooled.to_vec();
    }
    pooled
        .iter()
        .map(|p| {
            let mut v = Array1::from_elem(p.len() + 1, 1.0);
            v.slice_mut(s![..p.len()]).assign(p);
            v
        })
        .collect()
}

/// Train one classifier per concept. Concepts are solved in parallel; each
/// solve is sequential and deterministic.
pub fn train(pooled: &[Array1<f64>], labels: &LabelMatrix, costs: &[f64], opts: &SvmOptions) -> Result<SvmModel> {
    let n = pooled.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 images, got {n}")));
    }
    if labels.n_images() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} pooled maps but {} labelled images",
            labels.n_images()
        )));
    }
    let k = labels.n_concepts();
    if costs.len() != k {
        return Err(Error::ShapeMismatch(format!("{} costs for {k} concepts", costs.len())));
    }
    if let Some(c) = costs.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::OutOfRange(format!("svm cost must be > 0, got {c}")));
    }
    let dim = pooled[0].len();
    if pooled.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("pooled maps have differing dimensions".into()));
    }
    if pooled.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("pooled map".into()));
    }
    labels.check_trainable()?;

    let xs = augment(pooled, opts.bias_feature);
    let weights: Vec<Array1<f64>> = (0..k)
        .into_par_iter()
        .map(|concept| {
            let ys = labels.concept_column(concept);
            let (w, _, stats) = solve_binary(&xs, &ys, costs[concept], opts);
            log::debug!(
                "concept {concept}: {} epochs, primal {:.6e}, gap {:.3e}",
                stats.epochs,
                stats.primal,
                stats.primal - stats.dual
            );
            w
        })
        .collect();
    Ok(SvmModel {
        weights,
        costs: costs.to_vec(),
        concept_names: labels.concept_names.clone(),
        bias_feature: opts.bias_feature,
    })
}

/// `f_k = w_k' phi` for every concept.
pub fn score(model: &SvmModel, pooled: &Array1<f64>) -> Result<Vec<f64>> {
    model.check_dim(pooled)?;
    Ok((0..model.n_concepts()).map(|k| model.decision(k, pooled)).collect())
}

/// Concepts whose score is strictly positive.
pub fn annotate(model: &SvmModel, pooled: &Array1<f64>) -> Result<Vec<String>> {
    let scores = score(model, pooled)?;
    Ok(present(&scores)
        .into_iter()
        .map(|k| model.concept_names[k].clone())
        .collect())
}

/// Indices of strictly positive scores; exact zeros are absent.
pub fn present(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(k, _)| k)
        .collect()
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Serialize as
/// `"CTXM" | version | K | D | bias u8 | names | f32 weights | f64 costs | context sha256`.
pub fn write_model<W: Write>(w: &mut W, model: &SvmModel, context: &Fingerprint) -> std::io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_VERSION)?;
    w.write_u32::<LittleEndian>(model.n_concepts() as u32)?;
    w.write_u32::<LittleEndian>(model.dim() as u32)?;
    w.write_u8(u8::from(model.bias_feature))?;
    for name in &model.concept_names {
        write_str(w, name)?;
    }
    for wk in &model.weights {
        for &v in wk {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    for &c in &model.costs {
        w.write_f64::<LittleEndian>(c)?;
    }
    w.write_all(context)
}

pub fn read_model<R: Read>(r: &mut R) -> Result<(SvmModel, Fingerprint)> {
    let bad = |reason: String| Error::format("<model>", reason);
    let io = |e: std::io::Error| Error::format("<model>", format!("truncated or invalid: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MODEL_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != MODEL_VERSION {
        return Err(bad(format!("unsupported model version {version}")));
    }
    let k = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let bias_feature = match r.read_u8().map_err(io)? {
        0 => false,
        1 => true,
        other => return Err(bad(format!("bad bias flag {other}"))),
    };
    let names = (0..k)
        .map(|_| read_str(r))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io)?;
    let len = d + usize::from(bias_feature);
    let mut weights = Vec::with_capacity(k);
    for _ in 0..k {
        let mut buf = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut buf).map_err(io)?;
        weights.push(buf.into_iter().map(f64::from).collect::<Array1<f64>>());
    }
    let mut costs = vec![0f64; k];
    r.read_f64_into::<LittleEndian>(&mut costs).map_err(io)?;
    let mut context = [0u8; 32];
    r.read_exact(&mut context).map_err(io)?;
    if weights.iter().flatten().any(|v| !v.is_finite()) {
        return Err(bad("non-finite weight".into()));
    }
    if costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(bad("svm cost must be > 0".into()));
    }
    Ok((
        SvmModel {
            weights,
            costs,
            concept_names: names,
            bias_feature,
        },
        context,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn labels(ys: &[&[i8]]) -> LabelMatrix {
        let n = ys.len();
        let k = ys[0].len();
        let entries = Array2::from_shape_fn((n, k), |(i, j)| ys[i][j]);
        LabelMatrix::new(
            (0..n).map(|i| format!("img{i}")).collect(),
            (0..k).map(|j| format!("c{j}")).collect(),
            entries,
        )
        .unwrap()
    }

    fn primal(w: f64, c: f64) -> f64 {
        // 1-D toy: x = -1 (y = -1), x = +1 (y = +1)
        0.5 * w * w + c * 2.0 * (1.0 - w).max(0.0)
    }

    #[test]
    fn one_dimensional_toy() {
        // oracle: scan w on a 1e-4 grid
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=40_000 {
            let w = -2.0 + i as f64 * 1e-4;
            let v = primal(w, 10.0);
            if v < best.0 {
                best = (v, w);
            }
        }
        assert!((best.1 - 1.0).abs() < 1e-4);
        assert!((best.0 - 0.5).abs() < 1e-8);

        let pooled = vec![array![-1.0], array![1.0]];
        let y = labels(&[&[-1], &[1]]);
        let model = train(&pooled, &y, &[10.0], &SvmOptions::default()).unwrap();
        assert!((model.weights[0][0] - best.1).abs() < 1e-4);
        let (obj, _) = model.objective(&pooled, &y).unwrap();
        assert!(obj[0] <= best.0 + 1e-6);

        for (p, phi) in pooled.iter().enumerate() {
            let s = score(&model, phi).unwrap()[0];
            assert_eq!(s > 0.0, y.get(p, 0) > 0.0);
        }
    }

    #[test]
    fn duplicated_examples_with_half_cost_match() {
        let pooled = vec![
            array![0.5, 1.0],
            array![1.0, -0.2],
            array![-0.3, 0.4],
            array![-1.0, -0.5],
        ];
        let y = labels(&[&[1], &[1], &[-1], &[-1]]);
        let opts = SvmOptions {
            tol: 1e-12,
            max_epochs: 100_000,
            ..SvmOptions::default()
        };
        let m1 = train(&pooled, &y, &[2.0], &opts).unwrap();
        let doubled: Vec<_> = pooled.iter().chain(pooled.iter()).cloned().collect();
        let y2 = labels(&[&[1], &[1], &[-1], &[-1], &[1], &[1], &[-1], &[-1]]);
        let m2 = train(&doubled, &y2, &[1.0], &opts).unwrap();
        let (o1, _) = m1.objective(&pooled, &y).unwrap();
        let (o2, _) = m2.objective(&doubled, &y2).unwrap();
        assert!((o1[0] - o2[0]).abs() < 1e-9);
        for j in 0..2 {
            assert!((m1.weights[0][j] - m2.weights[0][j]).abs() < 1e-5);
        }
    }

    #[test]
    fn single_sign_concept_is_named() {
        let pooled = vec![array![1.0], array![2.0]];
        let y = labels(&[&[1, 1], &[1, -1]]);
        match train(&pooled, &y, &[1.0, 1.0], &SvmOptions::default()) {
            Err(Error::SingleSignConcept(name)) => assert_eq!(name, "c0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn score_is_linear_and_zero_at_origin() {
        let model = SvmModel {
            weights: vec![array![1.0, -2.0], array![0.5, 0.5]],
            costs: vec![1.0, 1.0],
            concept_names: vec!["a".into(), "b".into()],
            bias_feature: false,
        };
        assert_eq!(score(&model, &array![0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let phi = array![0.3, 0.7];
        let s1 = score(&model, &phi).unwrap();
        let s3 = score(&model, &(&phi * 3.0)).unwrap();
        for k in 0..2 {
            assert!((s3[k] - 3.0 * s1[k]).abs() < 1e-12);
        }
        assert!(score(&model, &array![1.0]).is_err());
    }

    #[test]
    fn annotate_decision_rule() {
        let model = SvmModel {
            weights: vec![array![0.5], array![-0.2], array![0.0]],
            costs: vec![1.0; 3],
            concept_names: vec!["a".into(), "b".into(), "c".into()],
            bias_feature: false,
        };
        assert_eq!(annotate(&model, &array![1.0]).unwrap(), vec!["a".to_string()]);
        assert!(annotate(&model, &array![-1.0]).unwrap() == vec!["b".to_string()]);
        assert_eq!(present(&[-1.0, -0.1]), Vec::<usize>::new());
        assert_eq!(present(&[1.0, 0.1]), vec![0, 1]);
    }

    #[test]
    fn objective_at_most_zero_weight_objective() {
        let pooled = vec![array![1.0, 0.2], array![0.9, 0.1], array![0.95, 0.15], array![1.1, 0.3]];
        let y = labels(&[&[1, -1], &[-1, 1], &[1, 1], &[-1, -1]]);
        let model = train(&pooled, &y, &[3.0, 0.5], &SvmOptions::default()).unwrap();
        let (obj, _) = model.objective(&pooled, &y).unwrap();
        assert!(obj[0] <= 3.0 * 4.0);
        assert!(obj[1] <= 0.5 * 4.0);
    }

    #[test]
    fn complementary_slackness_on_toy() {
        let xs = vec![array![3.0], array![1.0], array![-1.0], array![-3.0]];
        let ys = vec![1.0, 1.0, -1.0, -1.0];
        let (w, alpha, _) = solve_binary(&xs, &ys, 10.0, &SvmOptions::default());
        for i in 0..4 {
            if ys[i] * w.dot(&xs[i]) > 1.0 + 1e-9 {
                assert_eq!(alpha[i], 0.0);
            }
        }
    }

    #[test]
    fn bias_feature_separates_offset_data() {
        let pooled = vec![array![2.0], array![2.1], array![2.9], array![3.0]];
        let y = labels(&[&[-1], &[-1], &[1], &[1]]);
        let opts = SvmOptions {
            bias_feature: true,
            ..SvmOptions::default()
        };
        let model = train(&pooled, &y, &[100.0], &opts).unwrap();
        assert_eq!(model.dim(), 1);
        for (p, phi) in pooled.iter().enumerate() {
            assert_eq!(score(&model, phi).unwrap()[0] > 0.0, y.get(p, 0) > 0.0);
        }
    }

    #[test]
    fn model_round_trip_and_bad_magic() {
        let model = SvmModel {
            weights: vec![array![0.5, 0.25], array![-1.0, 2.0]],
            costs: vec![1.0, 4.0],
            concept_names: vec!["sky".into(), "dog".into()],
            bias_feature: false,
        };
        let mut buf = Vec::new();
        write_model(&mut buf, &model, &[7u8; 32]).unwrap();
        let (back, fp) = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(fp, [7u8; 32]);
        buf[0] = b'X';
        assert!(read_model(&mut buf.as_slice()).is_err());
    }
}
