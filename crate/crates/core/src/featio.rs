//! Per-cell feature ingestion, the context-free initial maps, labels, and the
//! synthetic spatial-arrangement dataset.
//!
//! Feature files are little-endian binary:
//!
//! ```text
//! "CTXF" | version u32 | n_images u32 | rows u32 | cols u32 | d0 u32 | mode u8 | levels u32
//! per image: id_len u32 | id bytes (UTF-8) | rows*cols*d0 f32, cell-major, cells row-major
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub const FEATURE_MAGIC: &[u8; 4] = b"CTXF";
pub const FEATURE_VERSION: u32 = 1;
pub const DEFAULT_HI_LEVELS: u32 = 16;

/// Which context-free kernel the cell features are embedded for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FeatureMode {
    Linear,
    Hi { levels: u32 },
}

impl FeatureMode {
    pub fn parse(name: &str, levels: u32) -> Result<Self> {
        match name {
            "linear" => Ok(FeatureMode::Linear),
            "hi" => {
                if levels == 0 {
                    return Err(Error::OutOfRange("hi levels must be >= 1".into()));
                }
                Ok(FeatureMode::Hi { levels })
            }
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }

    fn code(&self) -> u8 {
        match self {
            FeatureMode::Linear => 0,
            FeatureMode::Hi { .. } => 1,
        }
    }

    fn levels(&self) -> u32 {
        match self {
            FeatureMode::Linear => 0,
            FeatureMode::Hi { levels } => *levels,
        }
    }

    /// Dimension of the mapped cell vector for raw dimension `d0`.
    pub fn mapped_dim(&self, d0: usize) -> usize {
        match self {
            FeatureMode::Linear => d0,
            FeatureMode::Hi { levels } => d0 * *levels as usize,
        }
    }
}

/// One image after the initial map: `cells` is `n x dim`, row `x` is `V_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub image_id: String,
    pub cells: Array2<f64>,
}

impl ImageFeatures {
    pub fn new(image_id: impl Into<String>, cells: Array2<f64>) -> Result<Self> {
        if cells.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cell feature".into()));
        }
        Ok(ImageFeatures {
            image_id: image_id.into(),
            cells,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.nrows()
    }

    pub fn dim(&self) -> usize {
        self.cells.ncols()
    }
}

/// Raw image features as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub image_id: String,
    pub cells: Array2<f32>,
}

/// In-memory contents of a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub rows: usize,
    pub cols: usize,
    pub d0: usize,
    pub mode: FeatureMode,
    pub images: Vec<RawImage>,
}

impl FeatureFile {
    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|im| im.image_id.clone()).collect()
    }

    /// Apply the initial map to every image.
    pub fn mapped(&self, mode: FeatureMode) -> Result<Vec<ImageFeatures>> {
        self.images
            .iter()
            .map(|im| {
                let n = im.cells.nrows();
                let dim = mode.mapped_dim(self.d0);
                let mut out = Array2::zeros((n, dim));
                for (x, row) in im.cells.rows().into_iter().enumerate() {
                    let cell: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                    let mapped = match mode {
                        FeatureMode::Linear => phi0_linear(&cell)?,
                        FeatureMode::Hi { levels } => phi0_hi(&cell, levels).map_err(|e| match e {
                            Error::OutOfRange(m) => Error::OutOfRange(format!("image `{}` cell {x}: {m}", im.image_id)),
                            other => other,
                        })?,
                    };
                    out.row_mut(x).assign(&mapped);
                }
                ImageFeatures::new(im.image_id.clone(), out)
            })
            .collect()
    }
}

/// Identity map of the linear kernel.
pub fn phi0_linear(cell: &[f64]) -> Result<Array1<f64>> {
    if let Some(i) = cell.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("entry {i}")));
    }
    Ok(Array1::from(cell.to_vec()))
}

/// Unary ("decimal to unary") map of the histogram-intersection kernel.
///
/// Each entry `v` becomes a block of `levels` slots whose first
/// `round(v * levels)` slots hold `1/sqrt(levels)`, so inner products equal
/// `sum_i min(q(u_i), q(v_i))` with `q(v) = round(v * levels) / levels`.
pub fn phi0_hi(cell: &[f64], levels: u32) -> Result<Array1<f64>> {
    if levels == 0 {
        return Err(Error::OutOfRange("hi levels must be >= 1".into()));
    }
    let u = levels as usize;
    let slot = 1.0 / (levels as f64).sqrt();
    let mut out = Array1::zeros(cell.len() * u);
    for (i, &v) in cell.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("entry {i}")));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("entry {i} = {v} not in [0, 1]")));
        }
        let m = (v * levels as f64).round() as usize;
        for s in 0..m.min(u) {
            out[i * u + s] = slot;
        }
    }
    Ok(out)
}

pub fn save_features(path: &Path, file: &FeatureFile) -> Result<()> {
    let n = file.rows * file.cols;
    let f = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(format!("write {}", path.display()), e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FEATURE_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(file.images.len() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(file.rows as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(file.cols as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(file.d0 as u32).map_err(io)?;
    w.write_u8(file.mode.code()).map_err(io)?;
    w.write_u32::<LittleEndian>(file.mode.levels()).map_err(io)?;
    for im in &file.images {
        if im.cells.dim() != (n, file.d0) {
            return Err(Error::ShapeMismatch(format!(
                "image `{}` has shape {:?}, expected ({n}, {})",
                im.image_id,
                im.cells.dim(),
                file.d0
            )));
        }
        let id = im.image_id.as_bytes();
        w.write_u32::<LittleEndian>(id.len() as u32).map_err(io)?;
        w.write_all(id).map_err(io)?;
        for &v in im.cells.iter() {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a feature file without applying any map.
pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let f = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = BufReader::new(f);
    let fmt = |reason: String| Error::format(path, reason);
    let header = |e: std::io::Error| Error::format(path, format!("truncated header: {e}"));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(header)?;
    if &magic != FEATURE_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(header)?;
    if version != FEATURE_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let n_images = r.read_u32::<LittleEndian>().map_err(header)? as usize;
    let rows = r.read_u32::<LittleEndian>().map_err(header)? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(header)? as usize;
    let d0 = r.read_u32::<LittleEndian>().map_err(header)? as usize;
    let mode_code = r.read_u8().map_err(header)?;
    let levels = r.read_u32::<LittleEndian>().map_err(header)?;
    let mode = match mode_code {
        0 => FeatureMode::Linear,
        1 => FeatureMode::parse("hi", levels)?,
        other => return Err(Error::UnknownMode(format!("mode byte {other}"))),
    };
    let n = rows * cols;

    let mut images = Vec::with_capacity(n_images.min(1 << 16));
    for i in 0..n_images {
        let short = |e: std::io::Error| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::ShapeMismatch(format!("image {i} is truncated; expected {n} cells of dimension {d0}"))
            } else {
                Error::io(format!("read {}", path.display()), e)
            }
        };
        let id_len = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(short)?;
        let image_id = String::from_utf8(id).map_err(|_| fmt(format!("image {i} id is not UTF-8")))?;
        let mut values = vec![0f32; n * d0];
        r.read_f32_into::<LittleEndian>(&mut values).map_err(short)?;
        let cells = Array2::from_shape_vec((n, d0), values).expect("shape checked");
        images.push(RawImage { image_id, cells });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    if !rest.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes after {n_images} images",
            rest.len()
        )));
    }
    Ok(FeatureFile {
        rows,
        cols,
        d0,
        mode,
        images,
    })
}

/// Load a feature file for `spec`, validating geometry and mode, and apply
/// the initial map.
pub fn load_features(path: &Path, spec: &GridSpec, mode: FeatureMode) -> Result<Vec<ImageFeatures>> {
    let file = read_feature_file(path)?;
    check_geometry(&file, spec, mode)?;
    file.mapped(mode)
}

pub(crate) fn check_geometry(file: &FeatureFile, spec: &GridSpec, mode: FeatureMode) -> Result<()> {
    if file.rows != spec.rows || file.cols != spec.cols {
        return Err(Error::ShapeMismatch(format!(
            "file grid {}x{} ({} cells) does not match configured {}x{} ({} cells)",
            file.rows,
            file.cols,
            file.rows * file.cols,
            spec.rows,
            spec.cols,
            spec.cells()
        )));
    }
    if file.mode != mode {
        return Err(Error::UnknownMode(format!(
            "file declares {:?} but {:?} was requested",
            file.mode, mode
        )));
    }
    Ok(())
}

/// `N x K` matrix of `-1/+1` memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub image_ids: Vec<String>,
    pub concept_names: Vec<String>,
    entries: Array2<i8>,
}

impl LabelMatrix {
    pub fn new(image_ids: Vec<String>, concept_names: Vec<String>, entries: Array2<i8>) -> Result<Self> {
        if entries.dim() != (image_ids.len(), concept_names.len()) {
            return Err(Error::ShapeMismatch(format!(
                "label entries {:?} vs {} images x {} concepts",
                entries.dim(),
                image_ids.len(),
                concept_names.len()
            )));
        }
        if let Some(v) = entries.iter().find(|&&v| v != 1 && v != -1) {
            return Err(Error::Labels(format!("label {v} is not -1 or +1")));
        }
        Ok(LabelMatrix {
            image_ids,
            concept_names,
            entries,
        })
    }

    pub fn n_images(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_concepts(&self) -> usize {
        self.entries.ncols()
    }

    pub fn get(&self, image: usize, concept: usize) -> f64 {
        self.entries[[image, concept]] as f64
    }

    pub fn entries(&self) -> &Array2<i8> {
        &self.entries
    }

    /// Labels of one concept over all images.
    pub fn concept_column(&self, concept: usize) -> Vec<f64> {
        self.entries.column(concept).iter().map(|&v| v as f64).collect()
    }

    /// Error naming the first concept that lacks a positive or a negative.
    pub fn check_trainable(&self) -> Result<()> {
        for (k, name) in self.concept_names.iter().enumerate() {
            let col = self.entries.column(k);
            let pos = col.iter().any(|&v| v > 0);
            let neg = col.iter().any(|&v| v < 0);
            if !(pos && neg) {
                return Err(Error::SingleSignConcept(name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    image_id: String,
    concept: String,
    label: i32,
}

/// Read `image_id,concept,label` rows and arrange them against `image_ids`.
/// Concepts are ordered by first appearance; every (image, concept) pair must
/// be present exactly once.
pub fn read_labels(path: &Path, image_ids: &[String]) -> Result<LabelMatrix> {
    let mut rdr = csv::Reader::from_path(path)?;
    {
        let headers = rdr.headers()?;
        if headers.iter().collect::<Vec<_>>() != ["image_id", "concept", "label"] {
            return Err(Error::format(path, "expected header `image_id,concept,label`"));
        }
    }
    let image_index: HashMap<&str, usize> = image_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut concepts: Vec<String> = Vec::new();
    let mut concept_index: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<(usize, usize, i8)> = Vec::new();
    for row in rdr.deserialize() {
        let row: LabelRow = row?;
        let Some(&i) = image_index.get(row.image_id.as_str()) else {
            return Err(Error::Labels(format!("unknown image `{}`", row.image_id)));
        };
        let k = *concept_index.entry(row.concept.clone()).or_insert_with(|| {
            concepts.push(row.concept.clone());
            concepts.len() - 1
        });
        let label = match row.label {
            1 => 1i8,
            -1 => -1i8,
            other => {
                return Err(Error::Labels(format!(
                    "label {other} for (`{}`, `{}`) is not -1 or 1",
                    row.image_id, row.concept
                )))
            }
        };
        cells.push((i, k, label));
    }
    let mut entries = Array2::<i8>::zeros((image_ids.len(), concepts.len()));
    for (i, k, v) in cells {
        if entries[[i, k]] != 0 {
            return Err(Error::Labels(format!(
                "duplicate label for (`{}`, `{}`)",
                image_ids[i], concepts[k]
            )));
        }
        entries[[i, k]] = v;
    }
    if let Some(((i, k), _)) = entries.indexed_iter().find(|(_, &v)| v == 0) {
        return Err(Error::Labels(format!(
            "missing label for (`{}`, `{}`)",
            image_ids[i], concepts[k]
        )));
    }
    LabelMatrix::new(image_ids.to_vec(), concepts, entries)
}

pub fn write_labels(path: &Path, labels: &LabelMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, id) in labels.image_ids.iter().enumerate() {
        for (k, concept) in labels.concept_names.iter().enumerate() {
            w.serialize(LabelRow {
                image_id: id.clone(),
                concept: concept.clone(),
                label: labels.entries[[i, k]] as i32,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Raw dimension of synthetic cells.
pub const SYNTHETIC_DIM: usize = 2;
const PROTOTYPE_A: [f64; SYNTHETIC_DIM] = [0.8, 0.2];
const PROTOTYPE_B: [f64; SYNTHETIC_DIM] = [0.2, 0.8];
const SYNTHETIC_NOISE: f64 = 0.02;

/// Two-class dataset whose classes differ only in spatial arrangement.
///
/// Class 1 ("a_left_of_b") fills columns `< cols / 2` with prototype A and
/// the rest with B; class 2 is its horizontal mirror, so both classes hold
/// the same number of A and B cells. Images alternate between classes.
/// Cells are perturbed by uniform noise, clipped to `[0, 1]`, L1-normalized
/// and stored as `f32`.
pub fn gen_synthetic(spec: &GridSpec, n_images: usize, seed: u64) -> Result<(FeatureFile, LabelMatrix)> {
    spec.validate()?;
    if n_images < 4 || !n_images.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "n_images must be even and >= 4, got {n_images}"
        )));
    }
    if spec.cols < 2 {
        return Err(Error::InvalidArgument(
            "synthetic data needs at least 2 grid columns".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.cells();
    let mut images = Vec::with_capacity(n_images);
    let mut entries = Array2::<i8>::zeros((n_images, 2));
    for p in 0..n_images {
        let class = p % 2;
        let mut cells = Array2::<f32>::zeros((n, SYNTHETIC_DIM));
        for x in 0..n {
            let (_, col) = spec.cell_coords(x);
            let src_col = if class == 0 { col } else { spec.cols - 1 - col };
            let proto = if src_col < spec.cols / 2 {
                &PROTOTYPE_A
            } else {
                &PROTOTYPE_B
            };
            let mut v = [0.0; SYNTHETIC_DIM];
            for (j, slot) in v.iter_mut().enumerate() {
                let noise = rng.random_range(-SYNTHETIC_NOISE..=SYNTHETIC_NOISE);
                *slot = (proto[j] + noise).clamp(0.0, 1.0);
            }
            let total: f64 = v.iter().sum();
            for j in 0..SYNTHETIC_DIM {
                cells[[x, j]] = (v[j] / total) as f32;
            }
        }
        images.push(RawImage {
            image_id: format!("syn_{p:05}"),
            cells,
        });
        entries[[p, 0]] = if class == 0 { 1 } else { -1 };
        entries[[p, 1]] = -entries[[p, 0]];
    }
    let file = FeatureFile {
        rows: spec.rows,
        cols: spec.cols,
        d0: SYNTHETIC_DIM,
        mode: FeatureMode::Linear,
        images,
    };
    let labels = LabelMatrix::new(
        file.image_ids(),
        vec!["a_left_of_b".into(), "a_right_of_b".into()],
        entries,
    )?;
    Ok((file, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hi_oracle(u: &[f64], v: &[f64], levels: u32) -> f64 {
        let q = |a: f64| (a * levels as f64).round() / levels as f64;
        u.iter().zip(v).map(|(&a, &b)| q(a).min(q(b))).sum()
    }

    #[test]
    fn linear_map_is_identity() {
        assert_eq!(phi0_linear(&[1.0, 2.0]).unwrap().to_vec(), vec![1.0, 2.0]);
        assert_eq!(phi0_linear(&[0.0, 0.0]).unwrap().to_vec(), vec![0.0, 0.0]);
        assert!(matches!(phi0_linear(&[f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn hi_full_block() {
        let m = phi0_hi(&[1.0], 4).unwrap();
        assert_eq!(m.to_vec(), vec![0.5; 4]);
        assert!((m.dot(&m) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hi_half_vs_three_quarters() {
        let a = phi0_hi(&[0.5], 4).unwrap();
        let b = phi0_hi(&[0.75], 4).unwrap();
        let oracle = hi_oracle(&[0.5], &[0.75], 4);
        assert_eq!(oracle, 0.5);
        assert!((a.dot(&b) - oracle).abs() < 1e-15);
    }

    #[test]
    fn hi_zero_is_empty() {
        let z = phi0_hi(&[0.0], 4).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let o = phi0_hi(&[1.0], 4).unwrap();
        assert_eq!(z.dot(&o), 0.0);
    }

    #[test]
    fn hi_errors() {
        assert!(matches!(phi0_hi(&[1.5], 4), Err(Error::OutOfRange(_))));
        assert!(matches!(phi0_hi(&[-0.1], 4), Err(Error::OutOfRange(_))));
        assert!(matches!(phi0_hi(&[0.5], 0), Err(Error::OutOfRange(_))));
        assert!(matches!(FeatureMode::parse("rbf", 4), Err(Error::UnknownMode(_))));
    }

    proptest! {
        #[test]
        fn hi_inner_product_is_quantized_intersection(
            pair in (1usize..12).prop_flat_map(|d| (
                proptest::collection::vec(0.0f64..=1.0, d),
                proptest::collection::vec(0.0f64..=1.0, d),
            )),
            levels in 1u32..40,
        ) {
            let (u, v) = pair;
            let got = phi0_hi(&u, levels).unwrap().dot(&phi0_hi(&v, levels).unwrap());
            let want = hi_oracle(&u, &v, levels);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }

        #[test]
        fn linear_inner_product(u in proptest::collection::vec(-5.0f64..5.0, 6), v in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let got = phi0_linear(&u).unwrap().dot(&phi0_linear(&v).unwrap());
            let want: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_balance_and_errors() {
        let spec = GridSpec::new(2, 2, 1, 4).unwrap();
        let (file, labels) = gen_synthetic(&spec, 4, 7).unwrap();
        assert_eq!(file.images.len(), 4);
        let pos: usize = (0..4).filter(|&p| labels.get(p, 0) > 0.0).count();
        assert_eq!(pos, 2);
        assert!(gen_synthetic(&spec, 5, 7).is_err());
        assert!(gen_synthetic(&spec, 2, 7).is_err());
        let narrow = GridSpec::new(2, 1, 1, 4).unwrap();
        assert!(gen_synthetic(&narrow, 4, 7).is_err());
    }

    #[test]
    fn synthetic_class_means_coincide() {
        // oracle: class-wise mean of the pooled context-free features
        let spec = GridSpec::new(2, 2, 1, 4).unwrap();
        let (file, labels) = gen_synthetic(&spec, 4, 7).unwrap();
        let mut means = [[0.0f64; SYNTHETIC_DIM]; 2];
        for (p, im) in file.images.iter().enumerate() {
            let class = if labels.get(p, 0) > 0.0 { 0 } else { 1 };
            for row in im.cells.rows() {
                for j in 0..SYNTHETIC_DIM {
                    means[class][j] += row[j] as f64 / 2.0;
                }
            }
        }
        // four cells per image, noise at most 0.02 per entry before normalization
        for (a, b) in means[0].iter().zip(&means[1]) {
            assert!((a - b).abs() < 4.0 * 4.0 * SYNTHETIC_NOISE);
        }
        // but the arrangement differs: class 1 has A in column 0
        let c1 = &file.images[0].cells;
        let c2 = &file.images[1].cells;
        assert!(c1[[0, 0]] > c1[[0, 1]]);
        assert!(c2[[0, 0]] < c2[[0, 1]]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = GridSpec::new(2, 2, 1, 4).unwrap();
        let a = gen_synthetic(&spec, 8, 11).unwrap();
        let b = gen_synthetic(&spec, 8, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&spec, 8, 12).unwrap();
        assert_ne!(a.0, c.0);
    }
}
