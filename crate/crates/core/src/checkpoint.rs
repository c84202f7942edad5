//! Training checkpoints and the JSON context export.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "CTXC" | version u32
//! rows u32 | cols u32 | radius u32 | sectors u32
//! mode u8 | levels u32 | d0 u32
//! gamma f64 | depth u32 | edges u32 | depth * edges f64 masked weights
//! model_len u64 | CTXM model bytes
//! outer_iter u32 | n_log u32 | n_log * (outer u32, E f64, svm_E f64, hinge f64, halvings u32)
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::ctxlearn::{IterationLog, TrainState};
use crate::error::{Error, Result};
use crate::featio::FeatureMode;
use crate::grid::{AdjacencySet, GridSpec, Support};
use crate::kernelcore::ContextStack;
use crate::svm::{read_model, write_model};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTXC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or score new images.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: FeatureMode,
    pub d0: usize,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn grid(&self) -> &GridSpec {
        self.state.ctx.grid()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let ctx = &self.state.ctx;
        let g = ctx.grid();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        for v in [g.rows, g.cols, g.radius, g.sectors] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        let (code, levels) = match self.mode {
            FeatureMode::Linear => (0u8, 0u32),
            FeatureMode::Hi { levels } => (1, levels),
        };
        w.write_u8(code)?;
        w.write_u32::<LittleEndian>(levels)?;
        w.write_u32::<LittleEndian>(self.d0 as u32)?;
        w.write_f64::<LittleEndian>(ctx.gamma())?;
        w.write_u32::<LittleEndian>(ctx.depth() as u32)?;
        w.write_u32::<LittleEndian>(ctx.support().edge_count() as u32)?;
        for layer in ctx.layers() {
            for v in layer.masked_values() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        let mut model = Vec::new();
        write_model(&mut model, &self.state.model, &ctx.fingerprint())?;
        w.write_u64::<LittleEndian>(model.len() as u64)?;
        w.write_all(&model)?;
        w.write_u32::<LittleEndian>(self.state.outer_iter as u32)?;
        w.write_u32::<LittleEndian>(self.state.log.len() as u32)?;
        for row in &self.state.log {
            w.write_u32::<LittleEndian>(row.outer_iter as u32)?;
            w.write_f64::<LittleEndian>(row.objective)?;
            w.write_f64::<LittleEndian>(row.svm_objective)?;
            w.write_f64::<LittleEndian>(row.hinge_sum)?;
            w.write_u32::<LittleEndian>(row.backtrack_halvings as u32)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| Error::format("<checkpoint>", format!("truncated or invalid: {e}"));
        let bad = |reason: String| Error::format("<checkpoint>", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        }
        let spec = GridSpec::new(dims[0], dims[1], dims[2], dims[3])?;
        let code = r.read_u8().map_err(io)?;
        let levels = r.read_u32::<LittleEndian>().map_err(io)?;
        let mode = match code {
            0 => FeatureMode::Linear,
            1 => FeatureMode::parse("hi", levels)?,
            other => return Err(Error::UnknownMode(format!("mode byte {other}"))),
        };
        let d0 = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let gamma = r.read_f64::<LittleEndian>().map_err(io)?;
        let depth = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let edges = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let support = Arc::new(Support::new(spec)?);
        if edges != support.edge_count() {
            return Err(bad(format!(
                "{edges} masked weights per layer, grid implies {}",
                support.edge_count()
            )));
        }
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            let mut values = vec![0f64; edges];
            r.read_f64_into::<LittleEndian>(&mut values).map_err(io)?;
            let mut layer = AdjacencySet::zeros(Arc::clone(&support));
            layer.set_masked_values(&values)?;
            layers.push(layer);
        }
        let ctx = ContextStack::new(layers, gamma)?;

        let model_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut model_bytes = vec![0u8; model_len];
        r.read_exact(&mut model_bytes).map_err(io)?;
        let (model, fp) = read_model(&mut model_bytes.as_slice())?;
        if fp != ctx.fingerprint() {
            return Err(bad("model was trained under a different context".into()));
        }
        let outer_iter = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let n_log = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut log = Vec::with_capacity(n_log.min(1 << 16));
        for _ in 0..n_log {
            log.push(IterationLog {
                outer_iter: r.read_u32::<LittleEndian>().map_err(io)? as usize,
                objective: r.read_f64::<LittleEndian>().map_err(io)?,
                svm_objective: r.read_f64::<LittleEndian>().map_err(io)?,
                hinge_sum: r.read_f64::<LittleEndian>().map_err(io)?,
                backtrack_halvings: r.read_u32::<LittleEndian>().map_err(io)? as usize,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            mode,
            d0,
            state: TrainState {
                ctx,
                model,
                objective_history: log.iter().map(|l| l.objective).collect(),
                outer_iter,
                log,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Checkpoint::read(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }
}

/// CSV training log: `outer_iter,E,svm_objective,hinge_sum,backtrack_halvings`.
pub fn write_training_log(path: &Path, log: &[IterationLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["outer_iter", "E", "svm_objective", "hinge_sum", "backtrack_halvings"])?;
    for row in log {
        w.write_record([
            row.outer_iter.to_string(),
            format!("{:e}", row.objective),
            format!("{:e}", row.svm_objective),
            format!("{:e}", row.hinge_sum),
            row.backtrack_halvings.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeExport {
    pub from_cell: usize,
    pub to_cell: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorExport {
    pub sector: usize,
    pub edges: Vec<EdgeExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerExport {
    pub layer: usize,
    pub sectors: Vec<SectorExport>,
}

/// Context weights for plotting: cell `i` sits at `(i / cols, i % cols)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextExport {
    pub grid: GridSpec,
    pub gamma: f64,
    /// Sector names in index order (empty unless there are four sectors).
    pub sector_names: Vec<String>,
    pub layers: Vec<LayerExport>,
}

pub fn export_context(ctx: &ContextStack) -> ContextExport {
    let grid = *ctx.grid();
    let sector_names = if grid.sectors == 4 {
        ["left", "right", "up", "down"].map(String::from).to_vec()
    } else {
        Vec::new()
    };
    let layers = ctx
        .layers()
        .iter()
        .enumerate()
        .map(|(t, layer)| LayerExport {
            layer: t,
            sectors: (0..layer.sectors())
                .map(|c| SectorExport {
                    sector: c,
                    edges: layer
                        .weighted_edges(c)
                        .map(|(x, x2, w)| EdgeExport {
                            from_cell: x,
                            to_cell: x2,
                            weight: w,
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    ContextExport {
        grid,
        gamma: ctx.gamma(),
        sector_names,
        layers,
    }
}

/// Rebuild a context from its export; edges not listed are zero.
pub fn import_context(export: &ContextExport) -> Result<ContextStack> {
    let support = Arc::new(Support::new(export.grid)?);
    let mut layers = Vec::with_capacity(export.layers.len());
    for (t, le) in export.layers.iter().enumerate() {
        if le.layer != t {
            return Err(Error::InvalidArgument(format!(
                "layer {} listed at position {t}",
                le.layer
            )));
        }
        let mut layer = AdjacencySet::zeros(Arc::clone(&support));
        for se in &le.sectors {
            if se.sector >= support.sectors() {
                return Err(Error::InvalidArgument(format!("sector {} out of range", se.sector)));
            }
            for e in &se.edges {
                if e.from_cell >= support.cells() || e.to_cell >= support.cells() {
                    return Err(Error::InvalidArgument(format!(
                        "edge {} -> {} outside the grid",
                        e.from_cell, e.to_cell
                    )));
                }
                layer.set(se.sector, e.from_cell, e.to_cell, e.weight)?;
            }
        }
        layers.push(layer);
    }
    ContextStack::new(layers, export.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svm::SvmModel;

    fn state() -> TrainState {
        let spec = GridSpec::new(2, 3, 1, 4).unwrap();
        let mut ctx = ContextStack::handcrafted(&spec, 2, 0.7).unwrap();
        ctx.layers_mut()[1]
            .set(crate::grid::RIGHT, 0, 1, -0.123_456_789)
            .unwrap();
        let d = crate::kernelcore::map_dim(2, 4, 2);
        TrainState {
            ctx,
            model: SvmModel {
                weights: vec![ndarray::Array1::from_elem(d, 0.5), ndarray::Array1::from_elem(d, -0.25)],
                costs: vec![1.0, 2.0],
                concept_names: vec!["x".into(), "y".into()],
                bias_feature: false,
            },
            objective_history: vec![3.0, 2.5],
            outer_iter: 2,
            log: vec![
                IterationLog {
                    outer_iter: 1,
                    objective: 3.0,
                    svm_objective: 3.1,
                    hinge_sum: 1.0,
                    backtrack_halvings: 0,
                },
                IterationLog {
                    outer_iter: 2,
                    objective: 2.5,
                    svm_objective: 2.9,
                    hinge_sum: 0.5,
                    backtrack_halvings: 3,
                },
            ],
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            mode: FeatureMode::Hi { levels: 8 },
            d0: 2,
            state: state(),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let ck = Checkpoint {
            mode: FeatureMode::Linear,
            d0: 2,
            state: state(),
        };
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::read(&mut bytes.as_slice()).is_err());
        let mut bytes = ck.to_bytes();
        bytes[1] = b'Z';
        assert!(matches!(
            Checkpoint::read(&mut bytes.as_slice()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn handcrafted_export_weights() {
        let spec = GridSpec::new(3, 3, 1, 4).unwrap();
        let ctx = ContextStack::handcrafted(&spec, 1, 1.0).unwrap();
        let ex = export_context(&ctx);
        for se in &ex.layers[0].sectors {
            for e in &se.edges {
                let (r, c) = spec.cell_coords(e.from_cell);
                let corner = (r == 0 || r == 2) && (c == 0 || c == 2);
                if corner {
                    assert_eq!(e.weight, 0.5);
                }
                if (r, c) == (1, 1) {
                    assert_eq!(e.weight, 0.25);
                }
            }
        }
    }

    #[test]
    fn export_import_round_trip_through_json() {
        let s = state();
        let json = serde_json::to_string(&export_context(&s.ctx)).unwrap();
        let back: ContextExport = serde_json::from_str(&json).unwrap();
        assert_eq!(import_context(&back).unwrap(), s.ctx);
    }
}
