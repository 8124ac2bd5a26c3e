//! Prompt serialization, tokenization and initial node/hyperedge features.

mod backbone;
mod vocab;

pub use backbone::{Backbone, ToyBackbone};
pub use vocab::{split_tokens, Vocab, EOS, EOS_TOKEN, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hypergraph::{EdgeKind, Hypergraph};
use crate::scaler::Scalers;
use crate::table::{Cell, ColumnKind, Table};

/// Numbers in prompts are rendered with at most this many decimals.
pub const PROMPT_DECIMALS: usize = 4;

fn prompt_value(cell: &Cell) -> String {
    match cell {
        Cell::Number(v) => {
            let s = format!("{v:.prec$}", prec = PROMPT_DECIMALS);
            let s = if s.contains('.') {
                s.trim_end_matches('0').trim_end_matches('.').to_string()
            } else {
                s
            };
            if s == "-0" {
                "0".into()
            } else {
                s
            }
        }
        other => other.render(),
    }
}

/// `Row {i}, {name}=>{value} EOS`, with ` | {name}=>{value}` appended for
/// every other present cell of the row when `with_context` is set. Missing
/// targets render as an empty value.
pub fn serialize_cell(t: &Table, i: usize, j: usize, with_context: bool) -> String {
    let names = t.names();
    let mut s = format!("Row {i}, {}=>{}", names[j], prompt_value(t.cell(i, j)));
    if with_context {
        for (k, cell) in t.row(i).iter().enumerate() {
            if k != j && !cell.is_missing() {
                s.push_str(&format!(" | {}=>{}", names[k], prompt_value(cell)));
            }
        }
    }
    s.push_str(" EOS");
    s
}

/// `This is row: {i} EOS` or `This is col: {name} EOS`.
pub fn serialize_hyperedge(hg: &Hypergraph, edge: usize, names: &[String]) -> Result<String> {
    Ok(match hg.edge_kind(edge)? {
        EdgeKind::Row(i) => format!("This is row: {i} EOS"),
        EdgeKind::Column(j) => format!("This is col: {} EOS", names[j]),
    })
}

/// Token embeddings of one prompt, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding(pub Tensor);

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last_token_feature(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::Contract("last-token feature of an empty prompt".into()));
        }
        Ok(self.0.row_slice(self.len() - 1).to_vec())
    }
}

pub fn encode(backbone: &dyn Backbone, ids: &[usize]) -> Result<PromptEmbedding> {
    Ok(PromptEmbedding(backbone.encode(ids)?))
}

/// Vocabulary plus frozen backbone: everything needed to turn text into features.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub vocab: Vocab,
    pub backbone: ToyBackbone,
}

impl TextEncoder {
    pub fn new(vocab: Vocab, dim: usize, seed: u64) -> Self {
        let backbone = ToyBackbone::new(vocab.len(), dim, seed);
        TextEncoder { vocab, backbone }
    }

    pub fn dim(&self) -> usize {
        self.backbone.dim()
    }

    pub fn last_token(&self, text: &str) -> Result<Vec<f64>> {
        encode(&self.backbone, &self.vocab.tokenize(text))?.last_token_feature()
    }

    /// Initial feature of cell `(i, j)` of a raw table whose missing cells
    /// reflect the current mask: `[unit value, 0, …]` for numerical and
    /// categorical cells, the last-token feature of the serialized cell for
    /// text, and zeros for missing cells.
    pub fn node_feature(&self, t: &Table, scalers: &Scalers, i: usize, j: usize) -> Result<Vec<f64>> {
        let dim = self.dim();
        let cell = t.cell(i, j);
        if cell.is_missing() {
            return Ok(vec![0.0; dim]);
        }
        match t.kind(j) {
            ColumnKind::Numerical | ColumnKind::Categorical => {
                let mut f = vec![0.0; dim];
                f[0] = scalers
                    .raw_unit_value(j, cell)
                    .ok_or_else(|| Error::Codec(format!("cell ({i},{j}) has no scaled value")))?;
                Ok(f)
            }
            ColumnKind::Text => self.last_token(&serialize_cell(t, i, j, false)),
        }
    }

    pub fn edge_feature(&self, hg: &Hypergraph, edge: usize, names: &[String]) -> Result<Vec<f64>> {
        self.last_token(&serialize_hyperedge(hg, edge, names)?)
    }

    /// Mean-pooled backbone features of a text (no EOS); zeros for empty text.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let ids = self.vocab.tokenize(text);
        let dim = self.dim();
        if ids.is_empty() {
            return Ok(vec![0.0; dim]);
        }
        let out = self.backbone.encode(&ids)?;
        let mut mean = vec![0.0; dim];
        for r in 0..out.rows() {
            mean.iter_mut().zip(out.row_slice(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= out.rows() as f64);
        Ok(mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn people() -> Table {
        Table::new(
            vec!["name".into(), "nation".into(), "age".into()],
            vec![ColumnKind::Text, ColumnKind::Categorical, ColumnKind::Numerical],
            vec![
                vec![Cell::Text("Trump".into()), Cell::Category("USA".into()), Cell::Missing],
                vec![Cell::Missing, Cell::Category("USA".into()), Cell::Number(0.125)],
            ],
        )
        .unwrap()
    }

    #[test]
    fn cell_template() {
        assert_eq!(serialize_cell(&people(), 0, 0, false), "Row 0, name=>Trump EOS");
    }

    #[test]
    fn masked_target_with_context() {
        let t = people();
        assert_eq!(
            serialize_cell(&t, 1, 0, true),
            "Row 1, name=> | nation=>USA | age=>0.125 EOS"
        );
        assert_eq!(serialize_cell(&t, 0, 0, true), "Row 0, name=>Trump | nation=>USA EOS");
    }

    #[test]
    fn prompt_numbers_are_rounded() {
        assert_eq!(prompt_value(&Cell::Number(0.123456)), "0.1235");
        assert_eq!(prompt_value(&Cell::Number(3.0)), "3");
        assert_eq!(prompt_value(&Cell::Number(-0.00001)), "0");
    }

    fn parse_edge(text: &str, names: &[String], d: usize) -> Option<usize> {
        let body = text.strip_suffix(" EOS")?;
        if let Some(i) = body.strip_prefix("This is row: ") {
            return i.parse::<usize>().ok().map(|i| i + d);
        }
        let name = body.strip_prefix("This is col: ")?;
        names.iter().position(|n| n == name)
    }

    #[test]
    fn hyperedge_templates_round_trip() {
        let names: Vec<String> = vec!["term".into(), "nation".into(), "x".into(), "y".into()];
        let hg = Hypergraph::new(5, 4).unwrap();
        assert_eq!(serialize_hyperedge(&hg, 6, &names).unwrap(), "This is row: 2 EOS");
        assert_eq!(serialize_hyperedge(&hg, 0, &names).unwrap(), "This is col: term EOS");
        assert_eq!(serialize_hyperedge(&hg, 1, &names).unwrap(), "This is col: nation EOS");
        for e in 0..hg.num_edges() {
            let text = serialize_hyperedge(&hg, e, &names).unwrap();
            assert_eq!(parse_edge(&text, &names, 4), Some(e));
        }
        assert!(serialize_hyperedge(&hg, 9, &names).is_err());
    }

    #[test]
    fn prompts_end_in_eos() {
        let t = people();
        let vocab = Vocab::build([serialize_cell(&t, 0, 0, true).as_str()]);
        for i in 0..2 {
            for j in 0..3 {
                let ids = vocab.tokenize(&serialize_cell(&t, i, j, true));
                assert_eq!(*ids.last().unwrap(), EOS);
            }
        }
    }

    #[test]
    fn single_token_last_feature() {
        let bb = ToyBackbone::new(5, 4, 0);
        let pe = encode(&bb, &[3]).unwrap();
        assert_eq!(pe.len(), 1);
        assert_eq!(pe.last_token_feature().unwrap(), pe.0.row_slice(0).to_vec());
        assert!(encode(&bb, &[]).unwrap().last_token_feature().is_err());
    }

    #[test]
    fn node_features_by_kind() {
        let t = people();
        let scalers = Scalers::fit(&t, &t.observed_mask()).unwrap();
        let vocab = Vocab::build(["Row 0, name=>Trump EOS", "a b"]);
        let enc = TextEncoder::new(vocab, 4, 1);
        let num = enc.node_feature(&t, &scalers, 1, 2).unwrap();
        assert_eq!(num, vec![0.5, 0.0, 0.0, 0.0]); // constant column → 0.5
        assert_eq!(enc.node_feature(&t, &scalers, 0, 2).unwrap(), vec![0.0; 4]);
        let cat = enc.node_feature(&t, &scalers, 0, 1).unwrap();
        assert_eq!(cat, vec![0.5, 0.0, 0.0, 0.0]); // single label → 0.5
        let text = enc.node_feature(&t, &scalers, 0, 0).unwrap();
        assert!(text.iter().all(|v| v.is_finite()) && text.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn word_order_changes_text_feature() {
        let feature = |text: &str| {
            let t = Table::new(vec!["s".into()], vec![ColumnKind::Text], vec![vec![Cell::Text(text.into())]])
                .unwrap();
            let scalers = Scalers::fit(&t, &t.observed_mask()).unwrap();
            let enc = TextEncoder::new(Vocab::build(["Row 0, s=>a b EOS"]), 8, 3);
            enc.node_feature(&t, &scalers, 0, 0).unwrap()
        };
        assert_ne!(feature("a b"), feature("b a"));
    }
}
