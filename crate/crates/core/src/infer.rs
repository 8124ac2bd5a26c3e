//! Imputation with a trained model: one message-passing pass per chunk, then
//! a single prediction per numerical or categorical cell and greedy decoding
//! for text cells.

use std::path::Path;
use std::rc::Rc;

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{encode, serialize_cell, EOS};
use crate::error::{Error, Result};
use crate::fusion::{self, argmax_token, take_last};
use crate::mask::MaskMatrix;
use crate::model::{Bound, ChunkInputs, PromptCache, QueryBatch, UnimpModel};
use crate::scaler::Scalers;
use crate::table::{Cell, ColumnKind, Table};
use crate::train::{DEFAULT_CHUNK, DEFAULT_TEXT_CHUNK};

/// Generation cap for text cells, in tokens.
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferConfig {
    /// Rows per chunk; `None` uses the training default for the table.
    pub chunk_size: Option<usize>,
    pub max_len: usize,
    /// Replace the graph feature by zeros (ablation).
    pub zero_graph: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            chunk_size: None,
            max_len: DEFAULT_MAX_LEN,
            zero_graph: false,
        }
    }
}

/// Imputed table plus the cells that were filled.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub table: Table,
    /// `false` where the cell was imputed.
    pub kept: MaskMatrix,
}

impl Imputation {
    /// `row,col,was_imputed` for every cell.
    pub fn provenance_csv(&self) -> String {
        provenance_csv(&self.kept)
    }
}

pub fn provenance_csv(kept: &MaskMatrix) -> String {
    let mut s = String::from("row,col,was_imputed\n");
    for i in 0..kept.n() {
        for j in 0..kept.d() {
            s.push_str(&format!("{i},{j},{}\n", u8::from(!kept.is_observed(i, j))));
        }
    }
    s
}

pub fn write_provenance(kept: &MaskMatrix, path: impl AsRef<Path>) -> Result<()> {
    crate::table::write_atomic(path.as_ref(), provenance_csv(kept).as_bytes())
}

/// Next token for a prompt against a fixed `z_g` (`2 × D`), PAD excluded.
pub fn decode_step(model: &UnimpModel, prompt_ids: &[usize], z_g: &Tensor) -> Result<usize> {
    if prompt_ids.is_empty() {
        return Err(Error::Contract("decode step needs a non-empty prompt".into()));
    }
    let z_p = encode(&model.encoder.backbone, prompt_ids)?.0;
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let out = fusion::xfusion(tape.constant(z_p), tape.constant(z_g.clone()), &bound.fusion)?;
    let logits = fusion::project(out, &bound.text, ColumnKind::Text)?;
    Ok(argmax_token(&take_last(&logits)))
}

/// Fills every cell with `mask = 0` (and every cell already missing from
/// `table`); other cells are copied unchanged.
pub fn impute(table: &Table, mask: &MaskMatrix, model: &UnimpModel, cfg: &InferConfig) -> Result<Imputation> {
    table.check_mask(mask)?;
    model.check_table(table)?;
    if cfg.max_len == 0 {
        return Err(Error::param("max_len", "must be positive"));
    }
    let kept = mask.intersect(&table.observed_mask())?;
    let shown = table.apply_mask(&kept)?;
    if kept.count_missing() == 0 {
        return Ok(Imputation { table: shown, kept });
    }
    let scalers = Scalers::fit(&shown, &kept)?;
    let size = cfg.chunk_size.unwrap_or(if table.kinds().contains(&ColumnKind::Text) {
        DEFAULT_TEXT_CHUNK
    } else {
        DEFAULT_CHUNK
    });
    if size == 0 {
        return Err(Error::param("chunk_size", "must be positive"));
    }
    let mut rows: Vec<Vec<Cell>> = shown.rows().map(<[Cell]>::to_vec).collect();
    let mut cache = PromptCache::new(0);
    for start in (0..table.n()).step_by(size) {
        let end = (start + size).min(table.n());
        let chunk = ChunkInputs::new(&model.encoder, shown.slice_rows(start, end), &scalers)?;
        let filled = impute_chunk(model, &chunk, &scalers, cfg, &mut cache)?;
        for (i, j, cell) in filled {
            rows[start + i][j] = cell;
        }
    }
    Ok(Imputation {
        table: Table::new(table.names().to_vec(), table.kinds().to_vec(), rows)?,
        kept,
    })
}

fn impute_chunk(
    model: &UnimpModel,
    chunk: &ChunkInputs,
    scalers: &Scalers,
    cfg: &InferConfig,
    cache: &mut PromptCache,
) -> Result<Vec<(usize, usize, Cell)>> {
    let t = &chunk.table;
    let visible = chunk.base_mask();
    let z_e = {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let z = chunk.graph(&tape, &bound, &visible)?.value();
        if cfg.zero_graph {
            Tensor::zeros(z.shape())
        } else {
            (*z).clone()
        }
    };
    let backbone = &model.encoder.backbone;
    let vocab = model.vocab();
    let hg = &chunk.hypergraph;
    let mut out = Vec::new();

    let mut scalar_cells = Vec::new();
    let mut text_cells = Vec::new();
    for (i, j) in visible.missing_cells() {
        let ids = vocab.tokenize(&serialize_cell(t, i, j, true));
        if t.kind(j).is_scalar() {
            scalar_cells.push((i, j, ids));
        } else {
            text_cells.push((i, j, ids, Vec::new(), false));
        }
    }

    if !scalar_cells.is_empty() {
        let mut batch = QueryBatch::new();
        for (i, j, ids) in &scalar_cells {
            batch.push(cache.encode(backbone, ids)?, ids.len() - 1..ids.len(), hg, *i, *j);
        }
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let pred = project_batch(&tape, &bound, &batch, &z_e, ColumnKind::Numerical)?;
        for (r, (i, j, _)) in scalar_cells.iter().enumerate() {
            let s = pred.get(r, 0);
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("prediction for cell ({i},{j})")));
            }
            let s = s.clamp(0.0, 1.0);
            let col = scalers.column(*j);
            let cell = match t.kind(*j) {
                ColumnKind::Numerical => Cell::Number(col.unscale(s)),
                _ => Cell::Category(
                    col.label(col.unit_to_id(s))
                        .ok_or_else(|| Error::Contract(format!("column {j} has no labels")))?
                        .to_string(),
                ),
            };
            out.push((*i, *j, cell));
        }
    }

    for _ in 0..cfg.max_len {
        let active: Vec<usize> = (0..text_cells.len()).filter(|&k| !text_cells[k].4).collect();
        if active.is_empty() {
            break;
        }
        let mut batch = QueryBatch::new();
        for &k in &active {
            let (i, j, ids, generated, _) = &text_cells[k];
            let mut seq = ids.clone();
            seq.extend_from_slice(generated);
            let n = seq.len();
            batch.push(cache.encode(backbone, &seq)?, n - 1..n, hg, *i, *j);
        }
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let logits = project_batch(&tape, &bound, &batch, &z_e, ColumnKind::Text)?;
        for (r, &k) in active.iter().enumerate() {
            let token = argmax_token(logits.row_slice(r));
            let cell = &mut text_cells[k];
            if token == EOS {
                cell.4 = true;
            } else {
                cell.3.push(token);
            }
        }
    }
    for (i, j, _, generated, _) in text_cells {
        out.push((i, j, Cell::Text(vocab.detokenize(&generated))));
    }
    Ok(out)
}

fn project_batch<'t>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    batch: &QueryBatch,
    z_e: &Tensor,
    kind: ColumnKind,
) -> Result<Rc<Tensor>> {
    let fused = batch.fuse(tape, bound, tape.constant(z_e.clone()))?;
    let head = if kind.is_scalar() { &bound.scalar } else { &bound.text };
    Ok(fusion::project(fused, head, kind)?.value())
}
