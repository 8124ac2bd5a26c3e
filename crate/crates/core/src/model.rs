//! Model state (trainable parameters plus the frozen text encoder), chunk
//! preparation and the batched forward pass shared by training and inference.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;

use crate::autodiff::{KeyLists, ParamSet, Tape, Tensor, Var};
use crate::bihmp::{self, Incidence, LayerVars};
use crate::encoder::{serialize_cell, serialize_hyperedge, Backbone, TextEncoder, ToyBackbone, Vocab, EOS};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionVars, Head, HeadKind};
use crate::hypergraph::Hypergraph;
use crate::mask::MaskMatrix;
use crate::masking::rng_for;
use crate::scaler::Scalers;
use crate::table::{Cell, ColumnKind, Table};

/// Default hidden width.
pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: DEFAULT_DIM,
            layers: bihmp::DEFAULT_LAYERS,
            seed: 0,
        }
    }
}

/// Everything a trained imputer consists of.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimpModel {
    pub config: ModelConfig,
    pub encoder: TextEncoder,
    /// BiHMP layers, XFusion and the two heads; all trainable.
    pub params: ParamSet,
}

/// Vocabulary covering every token the prompts of `tables` can produce.
pub fn vocab_for(tables: &[&Table]) -> Vocab {
    let mut vocab = Vocab::build([
        "Row , => | EOS This is row: col:",
        "0 1 2 3 4 5 6 7 8 9 . -",
    ]);
    for t in tables {
        for name in t.names() {
            vocab.extend(name);
        }
        for row in t.rows() {
            for cell in row {
                if let Cell::Category(_) | Cell::Text(_) = cell {
                    vocab.extend(&cell.render());
                }
            }
        }
    }
    vocab
}

impl UnimpModel {
    pub fn new(vocab: Vocab, config: ModelConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        if config.layers == 0 {
            return Err(Error::param("layers", "BiHMP needs at least one layer"));
        }
        let mut rng = rng_for(config.seed);
        let mut params = ParamSet::new();
        bihmp::init_params(&mut params, config.layers, config.dim, &mut rng);
        fusion::init_params(&mut params, config.dim, vocab.len(), &mut rng);
        let encoder = TextEncoder::new(vocab, config.dim, config.seed);
        Ok(UnimpModel {
            config,
            encoder,
            params,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.encoder.vocab
    }

    pub fn backbone_checksum(&self) -> u64 {
        self.encoder.backbone.checksum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = BTreeMap::new();
        meta.insert("dim".to_string(), self.config.dim.to_string());
        meta.insert("layers".to_string(), self.config.layers.to_string());
        meta.insert("seed".to_string(), self.config.seed.to_string());
        let tokens: Vec<&str> = (0..self.vocab().len()).map(|id| self.vocab().token(id)).collect();
        meta.insert("vocab".to_string(), tokens.join(" "));
        let mut all = self.params.clone();
        for (name, t) in self.encoder.backbone.tensors() {
            all.push(format!("backbone.{name}"), t, false);
        }
        all.to_bytes(&meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (all, meta) = ParamSet::from_bytes(bytes)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            field(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("meta `{k}` is not an integer")))
        };
        let config = ModelConfig {
            dim: num("dim")? as usize,
            layers: num("layers")? as usize,
            seed: num("seed")?,
        };
        let vocab = Vocab::from_tokens(field("vocab")?.split(' ').map(str::to_string).collect())?;
        let mut params = ParamSet::new();
        let mut frozen = HashMap::new();
        for p in all.iter() {
            match p.name.strip_prefix("backbone.") {
                Some(name) => {
                    frozen.insert(name.to_string(), p.value.clone());
                }
                None => {
                    params.push(p.name.clone(), p.value.clone(), p.trainable);
                }
            }
        }
        let get = |k: &str| {
            frozen
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing backbone tensor `{k}`")))
        };
        let backbone = ToyBackbone::from_tensors(config.seed, get("embed")?, get("wq")?, get("wk")?, get("wv")?)?;
        if backbone.vocab_size() != vocab.len() || backbone.dim() != config.dim {
            return Err(Error::Checkpoint("backbone shape disagrees with vocabulary or width".into()));
        }
        let model = UnimpModel {
            config,
            encoder: TextEncoder { vocab, backbone },
            params,
        };
        // layout must match a freshly initialised model
        let fresh = UnimpModel::new(model.encoder.vocab.clone(), config)?;
        let layout = |p: &ParamSet| -> Vec<(String, Vec<usize>)> {
            p.iter().map(|q| (q.name.clone(), q.value.shape().to_vec())).collect()
        };
        if layout(&fresh.params) != layout(&model.params) {
            return Err(Error::Checkpoint("parameter layout does not match the configuration".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::table::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        UnimpModel::from_bytes(&std::fs::read(path)?)
    }

    /// Records every parameter on `tape`, in `params` order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars: Vec<Var<'t>> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let get = |name: String| vars[self.params.index_of(&name).expect("parameter registered")];
        let lin = |name: &str| (get(format!("{name}.w")), get(format!("{name}.b")));
        let layers = (0..self.config.layers)
            .map(|l| LayerVars {
                f1: lin(&format!("bihmp.{l}.f1")),
                f2: lin(&format!("bihmp.{l}.f2")),
                f3: lin(&format!("bihmp.{l}.f3")),
            })
            .collect();
        let fusion = FusionVars {
            wq: get("fusion.wq.w".into()),
            wk: get("fusion.wk.w".into()),
            wv: get("fusion.wv.w".into()),
            w1: get("fusion.w1.w".into()),
            w2: get("fusion.w2.w".into()),
        };
        let (sw, sb) = lin("head.scalar");
        let (tw, tb) = lin("head.text");
        Bound {
            layers,
            fusion,
            scalar: Head {
                kind: HeadKind::Scalar,
                w: sw,
                b: sb,
            },
            text: Head {
                kind: HeadKind::Text,
                w: tw,
                b: tb,
            },
            vars,
        }
    }

    /// Checks that a table can be handled by this model's heads.
    pub fn check_table(&self, t: &Table) -> Result<()> {
        if t.d() == 0 {
            return Err(Error::Contract("table has no columns".into()));
        }
        Ok(())
    }
}

/// Tape handles of all trainable parameters.
pub struct Bound<'t> {
    /// One per parameter, in `ParamSet` order.
    pub vars: Vec<Var<'t>>,
    pub layers: Vec<LayerVars<'t>>,
    pub fusion: FusionVars<'t>,
    pub scalar: Head<'t>,
    pub text: Head<'t>,
}

/// Backbone outputs keyed by token sequence, reused across epochs.
#[derive(Debug, Default)]
pub struct PromptCache {
    map: HashMap<Vec<usize>, Rc<Tensor>>,
    capacity: usize,
}

impl PromptCache {
    pub fn new(capacity: usize) -> Self {
        PromptCache {
            map: HashMap::new(),
            capacity,
        }
    }

    pub fn encode(&mut self, backbone: &dyn Backbone, ids: &[usize]) -> Result<Rc<Tensor>> {
        if let Some(t) = self.map.get(ids) {
            return Ok(Rc::clone(t));
        }
        let t = Rc::new(backbone.encode(ids)?);
        if self.capacity > 0 {
            if self.map.len() >= self.capacity {
                self.map.clear();
            }
            self.map.insert(ids.to_vec(), Rc::clone(&t));
        }
        Ok(t)
    }
}

/// A contiguous block of rows with the mask-independent inputs precomputed:
/// the initial features of every present cell and of every hyperedge.
#[derive(Debug, Clone)]
pub struct ChunkInputs {
    /// Raw rows; base-missing cells are `Missing`.
    pub table: Table,
    pub hypergraph: Hypergraph,
    pub incidence: Incidence,
    node_features: Vec<Vec<f64>>,
    edge_features: Tensor,
}

impl ChunkInputs {
    pub fn new(encoder: &TextEncoder, table: Table, scalers: &Scalers) -> Result<Self> {
        let hg = Hypergraph::new(table.n(), table.d())?;
        let mut node_features = Vec::with_capacity(hg.num_nodes());
        for i in 0..table.n() {
            for j in 0..table.d() {
                node_features.push(encoder.node_feature(&table, scalers, i, j)?);
            }
        }
        let edges = (0..hg.num_edges())
            .map(|e| encoder.edge_feature(&hg, e, table.names()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ChunkInputs {
            incidence: Incidence::new(&hg),
            hypergraph: hg,
            node_features,
            edge_features: Tensor::from_rows(&edges)?,
            table,
        })
    }

    pub fn base_mask(&self) -> MaskMatrix {
        self.table.observed_mask()
    }

    /// Initial node features with the cells hidden by `visible` zeroed.
    pub fn node_tensor(&self, visible: &MaskMatrix) -> Result<Tensor> {
        let dim = self.edge_features.cols();
        let mut data = Vec::with_capacity(self.node_features.len() * dim);
        for (k, f) in self.node_features.iter().enumerate() {
            if visible.bits()[k] {
                data.extend_from_slice(f);
            } else {
                data.extend(std::iter::repeat(0.0).take(dim));
            }
        }
        Tensor::matrix(self.node_features.len(), dim, data)
    }

    /// Final hyperedge embeddings after message passing over the visible cells.
    pub fn graph<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, visible: &MaskMatrix) -> Result<Var<'t>> {
        self.table.check_mask(visible)?;
        let z_v = tape.constant(self.node_tensor(visible)?);
        let z_e = tape.constant(self.edge_features.clone());
        Ok(bihmp::run_bihmp(z_v, z_e, &bound.layers, &self.incidence)?.z_e)
    }

    pub fn edge_prompts(&self) -> Result<Vec<String>> {
        (0..self.hypergraph.num_edges())
            .map(|e| serialize_hyperedge(&self.hypergraph, e, self.table.names()))
            .collect()
    }
}

/// Token sequences of many cells stacked for one batched XFusion call.
#[derive(Debug, Default)]
pub struct QueryBatch {
    rows: Vec<Rc<Tensor>>,
    total_rows: usize,
    queries: Vec<usize>,
    self_keys: KeyLists,
    graph_keys: KeyLists,
}

impl QueryBatch {
    pub fn new() -> Self {
        QueryBatch {
            self_keys: KeyLists::new(),
            graph_keys: KeyLists::new(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Adds one encoded sequence for cell `(i, j)` and a query at every
    /// position in `positions`.
    pub fn push(&mut self, encoded: Rc<Tensor>, positions: std::ops::Range<usize>, hg: &Hypergraph, i: usize, j: usize) {
        let start = self.total_rows;
        for p in positions {
            debug_assert!(p < encoded.rows());
            self.queries.push(start + p);
            self.self_keys.push(start..=start + p);
            self.graph_keys.push([hg.column_edge(j), hg.row_edge(i)]);
        }
        self.total_rows += encoded.rows();
        self.rows.push(encoded);
    }

    /// Fused output, one row per query.
    pub fn fuse<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, z_e: Var<'t>) -> Result<Var<'t>> {
        if self.is_empty() {
            return Err(Error::Contract("fusion over an empty query batch".into()));
        }
        let dim = self.rows[0].cols();
        let mut data = Vec::with_capacity(self.total_rows * dim);
        for t in &self.rows {
            data.extend_from_slice(t.data());
        }
        let prompts = tape.constant(Tensor::matrix(self.total_rows, dim, data)?);
        fusion::xfusion_batched(
            prompts,
            Rc::new(self.queries.clone()),
            Rc::new(self.self_keys.clone()),
            z_e,
            Rc::new(self.graph_keys.clone()),
            &bound.fusion,
        )
    }
}

/// What a masked cell should be predicted as.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Unit-scaled numerical or categorical value.
    Scalar(f64),
    /// Token ids of the text, without EOS.
    Text(Vec<usize>),
}

/// Loss of one chunk: Huber over scalar targets plus per-cell mean token NLL
/// over text targets, divided by the number of target cells. Cells that are
/// present in the chunk but hidden by `visible` are the targets. Returns
/// `None` when there is no target.
pub fn chunk_loss<'t>(
    model: &UnimpModel,
    tape: &'t Tape,
    bound: &Bound<'t>,
    chunk: &ChunkInputs,
    scalers: &Scalers,
    visible: &MaskMatrix,
    delta: f64,
    cache: &mut PromptCache,
) -> Result<Option<Var<'t>>> {
    let t = &chunk.table;
    let base = chunk.base_mask();
    if !visible.is_subset_of(&base) {
        return Err(Error::Contract("visible cells must be a subset of the present cells".into()));
    }
    let mut targets = Vec::new();
    for i in 0..t.n() {
        for j in 0..t.d() {
            if base.is_observed(i, j) && !visible.is_observed(i, j) {
                let target = match t.kind(j) {
                    ColumnKind::Text => Target::Text(model.vocab().tokenize(&t.cell(i, j).render())),
                    _ => Target::Scalar(
                        scalers
                            .raw_unit_value(j, t.cell(i, j))
                            .ok_or_else(|| Error::Codec(format!("cell ({i},{j}) has no scaled value")))?,
                    ),
                };
                targets.push((i, j, target));
            }
        }
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let shown = t.apply_mask(visible)?;
    let z_e = chunk.graph(tape, bound, visible)?;
    let backbone = &model.encoder.backbone;

    let mut scalar_batch = QueryBatch::new();
    let mut scalar_targets = Vec::new();
    let mut text_batch = QueryBatch::new();
    let mut token_targets = Vec::new();
    let mut token_weights = Vec::new();
    for (i, j, target) in &targets {
        let mut ids = model.vocab().tokenize(&serialize_cell(&shown, *i, *j, true));
        let prompt_len = ids.len();
        match target {
            Target::Scalar(y) => {
                let enc = cache.encode(backbone, &ids)?;
                scalar_batch.push(enc, prompt_len - 1..prompt_len, &chunk.hypergraph, *i, *j);
                scalar_targets.push(*y);
            }
            Target::Text(tokens) => {
                ids.extend_from_slice(tokens);
                let enc = cache.encode(backbone, &ids)?;
                text_batch.push(enc, prompt_len - 1..ids.len(), &chunk.hypergraph, *i, *j);
                token_targets.extend_from_slice(tokens);
                token_targets.push(EOS);
                let w = 1.0 / (tokens.len() + 1) as f64;
                token_weights.extend(std::iter::repeat(w).take(tokens.len() + 1));
            }
        }
    }

    let mut total: Option<Var<'t>> = None;
    if !scalar_batch.is_empty() {
        let out = scalar_batch.fuse(tape, bound, z_e)?;
        let pred = fusion::project(out, &bound.scalar, ColumnKind::Numerical)?;
        total = Some(pred.huber(Rc::new(scalar_targets), delta)?.sum());
    }
    if !text_batch.is_empty() {
        let out = text_batch.fuse(tape, bound, z_e)?;
        let logits = fusion::project(out, &bound.text, ColumnKind::Text)?;
        let nll = logits.cross_entropy(Rc::new(token_targets))?;
        let n = token_weights.len();
        let weights = tape.constant(Tensor::matrix(1, n, token_weights)?);
        let text = weights.matmul(&nll)?;
        total = Some(match total {
            Some(s) => s.add(&text)?,
            None => text,
        });
    }
    Ok(total.map(|l| l.scale(1.0 / targets.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed() -> Table {
        Table::new(
            vec!["age".into(), "city".into(), "note".into()],
            vec![ColumnKind::Numerical, ColumnKind::Categorical, ColumnKind::Text],
            vec![
                vec![Cell::Number(30.0), Cell::Category("paris".into()), Cell::Text("blue sky".into())],
                vec![Cell::Number(40.0), Cell::Category("rome".into()), Cell::Text("red".into())],
                vec![Cell::Missing, Cell::Category("paris".into()), Cell::Text("blue".into())],
            ],
        )
        .unwrap()
    }

    fn tiny() -> UnimpModel {
        let t = mixed();
        UnimpModel::new(
            vocab_for(&[&t]),
            ModelConfig {
                dim: 8,
                layers: 2,
                seed: 3,
            },
        )
        .unwrap()
    }

    #[test]
    fn vocabulary_covers_prompts() {
        let t = mixed();
        let vocab = vocab_for(&[&t]);
        for i in 0..t.n() {
            for j in 0..t.d() {
                assert!(!vocab.tokenize(&serialize_cell(&t, i, j, true)).contains(&crate::encoder::UNK));
            }
        }
        let hg = Hypergraph::new(3, 3).unwrap();
        for e in 0..hg.num_edges() {
            let p = serialize_hyperedge(&hg, e, t.names()).unwrap();
            assert!(!vocab.tokenize(&p).contains(&crate::encoder::UNK), "{p}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = tiny();
        let bytes = m.to_bytes();
        let back = UnimpModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.backbone_checksum(), m.backbone_checksum());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let bytes = tiny().to_bytes();
        assert!(UnimpModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(UnimpModel::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn loss_is_none_without_targets() {
        let m = tiny();
        let t = mixed();
        let scalers = Scalers::fit(&t, &t.observed_mask()).unwrap();
        let chunk = ChunkInputs::new(&m.encoder, t.clone(), &scalers).unwrap();
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let mut cache = PromptCache::new(0);
        let loss = chunk_loss(&m, &tape, &bound, &chunk, &scalers, &t.observed_mask(), 1.0, &mut cache).unwrap();
        assert!(loss.is_none());
    }

    #[test]
    fn visible_must_not_reveal_missing_cells() {
        let m = tiny();
        let t = mixed();
        let scalers = Scalers::fit(&t, &t.observed_mask()).unwrap();
        let chunk = ChunkInputs::new(&m.encoder, t.clone(), &scalers).unwrap();
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let all = MaskMatrix::all_observed(3, 3);
        let mut cache = PromptCache::new(0);
        assert!(chunk_loss(&m, &tape, &bound, &chunk, &scalers, &all, 1.0, &mut cache).is_err());
    }

    #[test]
    fn cached_and_uncached_losses_agree() {
        let m = tiny();
        let t = mixed();
        let scalers = Scalers::fit(&t, &t.observed_mask()).unwrap();
        let chunk = ChunkInputs::new(&m.encoder, t.clone(), &scalers).unwrap();
        let mut visible = t.observed_mask();
        visible.set(0, 0, false);
        visible.set(1, 2, false);
        let run = |cache: &mut PromptCache| {
            let tape = Tape::new();
            let bound = m.bind(&tape);
            chunk_loss(&m, &tape, &bound, &chunk, &scalers, &visible, 1.0, cache)
                .unwrap()
                .unwrap()
                .value()
                .item()
        };
        let mut cache = PromptCache::new(100);
        let a = run(&mut PromptCache::new(0));
        let b = run(&mut cache);
        let c = run(&mut cache);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(b.to_bits(), c.to_bits());
        assert!(a.is_finite() && a > 0.0);
    }
}
