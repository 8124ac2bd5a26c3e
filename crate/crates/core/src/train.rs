//! Chunked, progressively masked training with Adam; fine-tuning reuses the
//! same loop on a single table.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{Adam, Tape, Tensor};
use crate::bihmp::DEFAULT_LAYERS;
use crate::encoder::split_tokens;
use crate::error::{Error, Result};
use crate::masking::{progressive_ratio, mask_fraction_of_observed, rng_for, DEFAULT_KAPPA, PROGRESSIVE_SPAN};
use crate::model::{chunk_loss, vocab_for, ChunkInputs, ModelConfig, PromptCache, UnimpModel, DEFAULT_DIM};
use crate::scaler::Scalers;
use crate::table::{ColumnKind, Table};

pub const DEFAULT_CHUNK: usize = 512;
pub const DEFAULT_TEXT_CHUNK: usize = 32;
pub const DEFAULT_BATCH: usize = 64;
pub const DEFAULT_TEXT_BATCH: usize = 2;
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_FINETUNE_EPOCHS: usize = 50;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_DELTA: f64 = 1.0;

const PROMPT_CACHE: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Rows per chunk; `None` picks 512, or 32 for tables with text.
    pub chunk_size: Option<usize>,
    /// Chunks per optimizer step; `None` picks 64, or 2 when any table has text.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub kappa: f64,
    pub delta: f64,
    pub seed: u64,
    pub layers: usize,
    pub dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            chunk_size: None,
            batch_size: None,
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            kappa: DEFAULT_KAPPA,
            delta: DEFAULT_DELTA,
            seed: 0,
            layers: DEFAULT_LAYERS,
            dim: DEFAULT_DIM,
        }
    }
}

fn has_text(t: &Table) -> bool {
    t.kinds().contains(&ColumnKind::Text)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: Option<usize>| match v {
            Some(0) => Err(Error::param(name, "must be positive")),
            _ => Ok(()),
        };
        positive("chunk_size", self.chunk_size)?;
        positive("batch_size", self.batch_size)?;
        positive("layers", Some(self.layers))?;
        positive("dim", Some(self.dim))?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("{} is not a finite non-negative rate", self.lr)));
        }
        if !(self.kappa >= 0.0 && self.kappa + PROGRESSIVE_SPAN < 1.0) {
            return Err(Error::param("kappa", format!("need 0 <= kappa and kappa + {PROGRESSIVE_SPAN} < 1")));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::param("delta", "must be positive"));
        }
        Ok(())
    }

    pub fn chunk_size_for(&self, t: &Table) -> usize {
        self.chunk_size
            .unwrap_or(if has_text(t) { DEFAULT_TEXT_CHUNK } else { DEFAULT_CHUNK })
    }

    pub fn batch_size_for(&self, tables: &[Table]) -> usize {
        self.batch_size.unwrap_or(if tables.iter().any(has_text) {
            DEFAULT_TEXT_BATCH
        } else {
            DEFAULT_BATCH
        })
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            seed: self.seed,
        }
    }

    /// `# key = value` lines.
    pub fn echo(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "# chunk_size = {}", opt(self.chunk_size));
        let _ = writeln!(s, "# batch_size = {}", opt(self.batch_size));
        let _ = writeln!(s, "# epochs = {}", self.epochs);
        let _ = writeln!(s, "# lr = {}", self.lr);
        let _ = writeln!(s, "# kappa = {}", self.kappa);
        let _ = writeln!(s, "# delta = {}", self.delta);
        let _ = writeln!(s, "# seed = {}", self.seed);
        let _ = writeln!(s, "# layers = {}", self.layers);
        let _ = writeln!(s, "# dim = {}", self.dim);
        s
    }
}

/// Row range `start..end` of table `table`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub table: usize,
    pub start: usize,
    pub end: usize,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Splits a table of `n` rows into `⌈n / size⌉` contiguous chunks.
pub fn split_rows(table: usize, n: usize, size: usize) -> Vec<Chunk> {
    (0..n)
        .step_by(size.max(1))
        .map(|start| Chunk {
            table,
            start,
            end: (start + size).min(n),
        })
        .collect()
}

/// Chunks of every table (table order, then row order), grouped into
/// batches of `batch_size`; the last batch may be short.
pub fn make_chunks(sizes: &[(usize, usize)], batch_size: usize) -> Vec<Vec<Chunk>> {
    let chunks: Vec<Chunk> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &(n, size))| split_rows(t, n, size))
        .collect();
    chunks.chunks(batch_size.max(1)).map(<[Chunk]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ratio: f64,
    /// Mean chunk loss; `None` for a degenerate epoch with nothing to predict.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub warnings: Vec<String>,
}

impl TrainReport {
    /// Config echo followed by one `epoch,r,loss` line per epoch.
    pub fn manifest(&self, cfg: &TrainConfig) -> String {
        let mut s = cfg.echo();
        s.push_str("epoch,r,loss\n");
        for e in &self.epochs {
            let loss = e.loss.map_or("nan".to_string(), |l| format!("{l:e}"));
            let _ = writeln!(s, "{},{},{}", e.epoch, e.ratio, loss);
        }
        s
    }

    pub fn write_manifest(&self, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
        crate::table::write_atomic(path.as_ref(), self.manifest(cfg).as_bytes())
    }
}

struct Prepared {
    scalers: Scalers,
    chunks: Vec<(Chunk, ChunkInputs)>,
}

fn prepare(model: &UnimpModel, tables: &[Table], cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    tables
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            model.check_table(t)?;
            let scalers = Scalers::fit(t, &t.observed_mask())?;
            let chunks = split_rows(ti, t.n(), cfg.chunk_size_for(t))
                .into_iter()
                .map(|c| Ok((c, ChunkInputs::new(&model.encoder, t.slice_rows(c.start, c.end), &scalers)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Prepared { scalers, chunks })
        })
        .collect()
}

fn mix_seed(seed: u64, epoch: usize, chunk: usize) -> u64 {
    seed ^ (epoch as u64) ^ ((chunk as u64) << 32)
}

/// Trains `model` in place on `tables`. Missing cells of the tables are the
/// base mask; each epoch hides an extra `r` fraction of the present cells of
/// every chunk and learns to predict them.
pub fn train(model: &mut UnimpModel, tables: &[Table], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if tables.is_empty() {
        return Err(Error::EmptyInput);
    }
    let prepared = prepare(model, tables, cfg)?;
    let mut order: Vec<(usize, usize)> = prepared
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.chunks.len()).map(move |c| (t, c)))
        .collect();
    let batch_size = cfg.batch_size_for(tables);
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut cache = PromptCache::new(PROMPT_CACHE);
    let mut report = TrainReport::default();
    let last = cfg.epochs.saturating_sub(1);
    for epoch in 0..cfg.epochs {
        let ratio = progressive_ratio(cfg.kappa, epoch, last);
        order.shuffle(&mut rng_for(cfg.seed ^ (epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut epoch_chunks = 0usize;
        for batch in order.chunks(batch_size) {
            let mut grads: Option<Vec<Tensor>> = None;
            let mut used = 0usize;
            for &(t, c) in batch {
                let p = &prepared[t];
                let (_, inputs) = &p.chunks[c];
                let chunk_id = (t << 20) + c;
                let visible = mask_fraction_of_observed(&inputs.base_mask(), ratio, mix_seed(cfg.seed, epoch, chunk_id))?;
                let tape = Tape::new();
                let bound = model.bind(&tape);
                let Some(loss) = chunk_loss(model, &tape, &bound, inputs, &p.scalers, &visible, cfg.delta, &mut cache)?
                else {
                    continue;
                };
                let value = loss.value().item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
                }
                let g = tape.backward(loss)?;
                let chunk_grads: Vec<Tensor> = bound.vars.iter().map(|v| g.get(*v)).collect();
                if chunk_grads.iter().any(|t| !t.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
                }
                match grads.as_mut() {
                    None => grads = Some(chunk_grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&chunk_grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                used += 1;
                epoch_loss += value;
            }
            if let Some(mut acc) = grads {
                let inv = 1.0 / used as f64;
                acc.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= inv));
                adam.step(&mut model.params, &acc);
                epoch_chunks += used;
            }
        }
        let loss = if epoch_chunks == 0 {
            report
                .warnings
                .push(format!("epoch {epoch}: no masked cells in any chunk, step skipped"));
            None
        } else {
            Some(epoch_loss / epoch_chunks as f64)
        };
        report.epochs.push(EpochRecord { epoch, ratio, loss });
    }
    report.steps = adam.steps();
    Ok(report)
}

/// Builds a fresh model over the vocabulary of `tables` and trains it.
pub fn pretrain(tables: &[Table], cfg: &TrainConfig) -> Result<(UnimpModel, TrainReport)> {
    cfg.validate()?;
    if tables.is_empty() {
        return Err(Error::EmptyInput);
    }
    let refs: Vec<&Table> = tables.iter().collect();
    let mut model = UnimpModel::new(vocab_for(&refs), cfg.model_config())?;
    let report = train(&mut model, tables, cfg)?;
    Ok((model, report))
}

/// Continues training a pretrained model on one table. The width, depth and
/// vocabulary of the model are kept; those fields of `cfg` are ignored.
pub fn finetune(model: &UnimpModel, table: &Table, cfg: &TrainConfig) -> Result<(UnimpModel, TrainReport)> {
    for j in 0..table.d() {
        if table.kind(j) != ColumnKind::Text {
            continue;
        }
        let known = table
            .column(j)
            .filter(|c| !c.is_missing())
            .flat_map(|c| split_tokens(&c.render()))
            .any(|tok| model.vocab().id(&tok) != crate::encoder::UNK);
        if !known {
            return Err(Error::Contract(format!(
                "text column `{}` shares no token with the model vocabulary",
                table.names()[j]
            )));
        }
    }
    let mut tuned = model.clone();
    let report = train(&mut tuned, std::slice::from_ref(table), cfg)?;
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Cell;

    #[test]
    fn chunk_sizes() {
        let c = split_rows(0, 1000, 512);
        assert_eq!(c.iter().map(Chunk::len).collect::<Vec<_>>(), vec![512, 488]);
        let b = make_chunks(&[(10, 2)], 2);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn chunks_partition_rows() {
        for n in 1..60 {
            for size in 1..20 {
                let mut seen = vec![0; n];
                for c in split_rows(0, n, size) {
                    assert!(c.len() <= size && !c.is_empty());
                    (c.start..c.end).for_each(|r| seen[r] += 1);
                }
                assert!(seen.iter().all(|&k| k == 1));
            }
        }
    }

    fn line_table(n: usize) -> Table {
        let rows = (0..n)
            .map(|i| {
                let x = i as f64 / n as f64;
                vec![Cell::Number(x), Cell::Number(2.0 * x)]
            })
            .collect();
        Table::new(vec!["x".into(), "y".into()], vec![ColumnKind::Numerical; 2], rows).unwrap()
    }

    fn small_cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            lr,
            dim: 8,
            layers: 1,
            chunk_size: Some(8),
            batch_size: Some(2),
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let t = line_table(16);
        let (m0, _) = pretrain(std::slice::from_ref(&t), &small_cfg(0, 0.0)).unwrap();
        let (m1, report) = pretrain(std::slice::from_ref(&t), &small_cfg(3, 0.0)).unwrap();
        assert_eq!(m0.params, m1.params);
        assert_eq!(report.steps, 3);
        assert_eq!(m0.backbone_checksum(), m1.backbone_checksum());
    }

    #[test]
    fn schedule_endpoints_in_report() {
        let t = line_table(16);
        let (_, report) = pretrain(std::slice::from_ref(&t), &small_cfg(4, 1e-3)).unwrap();
        assert_eq!(report.epochs.len(), 4);
        assert_eq!(report.epochs[0].ratio, 0.35);
        assert_eq!(report.epochs[3].ratio, 0.35 + 0.30);
        let manifest = report.manifest(&small_cfg(4, 1e-3));
        let data: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 5);
        assert_eq!(data[0], "epoch,r,loss");
    }

    #[test]
    fn equal_seeds_give_identical_models() {
        let t = line_table(16);
        let (a, ra) = pretrain(std::slice::from_ref(&t), &small_cfg(3, 1e-2)).unwrap();
        let (b, rb) = pretrain(std::slice::from_ref(&t), &small_cfg(3, 1e-2)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra, rb);
    }

    #[test]
    fn degenerate_epochs_are_skipped_with_warning() {
        // two rows of one cell each: floor(0.35 * 1) = 0 cells get hidden
        let t = Table::new(
            vec!["x".into()],
            vec![ColumnKind::Numerical],
            vec![vec![Cell::Number(1.0)], vec![Cell::Number(2.0)]],
        )
        .unwrap();
        let cfg = TrainConfig {
            chunk_size: Some(1),
            ..small_cfg(2, 1e-2)
        };
        let (m, report) = pretrain(std::slice::from_ref(&t), &cfg).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(report.warnings.len(), 2);
        assert!(report.epochs.iter().all(|e| e.loss.is_none()));
        let (fresh, _) = pretrain(std::slice::from_ref(&t), &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(m.params, fresh.params);
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let t = line_table(16);
        let (m, _) = pretrain(std::slice::from_ref(&t), &small_cfg(2, 1e-2)).unwrap();
        let (tuned, _) = finetune(&m, &t, &small_cfg(0, 1e-2)).unwrap();
        assert_eq!(tuned, m);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { kappa: 0.7, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { chunk_size: Some(0), ..TrainConfig::default() }.validate().is_err());
        assert!(pretrain(&[], &TrainConfig::default()).is_err());
    }
}
