//! Error metrics on scaled numerical/categorical cells and text similarity
//! metrics (ROUGE-1, cosine of embeddings) on text cells.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::encoder::{split_tokens, TextEncoder, EOS_TOKEN};
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::scaler::Scalers;
use crate::table::{ColumnKind, Table};

pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::UndefinedMetric("RMSE over zero cells".into()));
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

pub fn mae(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::UndefinedMetric("MAE over zero cells".into()));
    }
    Ok(errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64)
}

/// Differences `imputed - truth` on the [0, 1] scale over cells with
/// `mask = 0` in columns of kind `kind`. `scalers` are fitted on the truth.
pub fn scaled_errors(
    truth: &Table,
    imputed: &Table,
    mask: &MaskMatrix,
    scalers: &Scalers,
    kind: ColumnKind,
) -> Result<Vec<f64>> {
    if !truth.same_schema(imputed) || truth.n() != imputed.n() {
        return Err(Error::Shape("truth and imputed tables differ in shape or schema".into()));
    }
    truth.check_mask(mask)?;
    let mut errors = Vec::new();
    for (i, j) in mask.missing_cells() {
        if truth.kind(j) != kind || truth.cell(i, j).is_missing() {
            continue;
        }
        let unit = |t: &Table| {
            scalers
                .raw_unit_value(j, t.cell(i, j))
                .ok_or_else(|| Error::Codec(format!("cell ({i},{j}) has no value on the unit scale")))
        };
        errors.push(unit(imputed)? - unit(truth)?);
    }
    Ok(errors)
}

/// Which text goes under which denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RougeVariant {
    /// recall = overlap / |generated|, precision = overlap / |reference|.
    #[default]
    AsPrinted,
    /// recall = overlap / |reference|, precision = overlap / |generated|.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rouge {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn unigrams(text: &str) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for tok in split_tokens(text) {
        if tok != EOS_TOKEN {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-1 with clipped-count overlap. Empty input on either side gives zeros.
pub fn rouge1(generated: &str, reference: &str, variant: RougeVariant) -> Rouge {
    let g = unigrams(generated);
    let r = unigrams(reference);
    let (ng, nr): (usize, usize) = (g.values().sum(), r.values().sum());
    let overlap: usize = g.iter().map(|(t, c)| (*c).min(r.get(t).copied().unwrap_or(0))).sum();
    if ng == 0 || nr == 0 || overlap == 0 {
        return Rouge {
            recall: 0.0,
            precision: 0.0,
            f1: 0.0,
        };
    }
    let (over_g, over_r) = (overlap as f64 / ng as f64, overlap as f64 / nr as f64);
    let (recall, precision) = match variant {
        RougeVariant::AsPrinted => (over_g, over_r),
        RougeVariant::Standard => (over_r, over_g),
    };
    Rouge {
        recall,
        precision,
        f1: 2.0 * recall * precision / (recall + precision),
    }
}

/// Fixed-width text embedding used by [`cos_sim`].
pub trait Embedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

impl Embedder for TextEncoder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.embed_text(text)
    }
}

/// Cosine of two vectors; 0 when either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn cos_sim(generated: &str, reference: &str, embedder: &dyn Embedder) -> Result<f64> {
    Ok(cosine(&embedder.embed(generated)?, &embedder.embed(reference)?))
}

/// One `metric,column_kind,value` report entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricLine {
    pub metric: &'static str,
    pub kind: ColumnKind,
    pub value: f64,
    /// Number of cells the value averages over.
    pub cells: usize,
}

/// All metrics over the cells with `mask = 0`: RMSE and MAE per scalar
/// kind, mean ROUGE-1 and cosine similarity for text.
pub fn evaluate(
    truth: &Table,
    imputed: &Table,
    mask: &MaskMatrix,
    embedder: &dyn Embedder,
    variant: RougeVariant,
) -> Result<Vec<MetricLine>> {
    let scalers = Scalers::fit(truth, &truth.observed_mask())?;
    let mut lines = Vec::new();
    for kind in [ColumnKind::Numerical, ColumnKind::Categorical] {
        let errors = scaled_errors(truth, imputed, mask, &scalers, kind)?;
        if errors.is_empty() {
            continue;
        }
        let cells = errors.len();
        lines.push(MetricLine { metric: "rmse", kind, value: rmse(&errors)?, cells });
        lines.push(MetricLine { metric: "mae", kind, value: mae(&errors)?, cells });
    }
    let text_cells: Vec<(usize, usize)> = mask
        .missing_cells()
        .into_iter()
        .filter(|&(i, j)| truth.kind(j) == ColumnKind::Text && !truth.cell(i, j).is_missing())
        .collect();
    if !text_cells.is_empty() {
        let (mut r, mut p, mut f, mut c) = (0.0, 0.0, 0.0, 0.0);
        for &(i, j) in &text_cells {
            let (gen, reference) = (imputed.cell(i, j).render(), truth.cell(i, j).render());
            let score = rouge1(&gen, &reference, variant);
            r += score.recall;
            p += score.precision;
            f += score.f1;
            c += cos_sim(&gen, &reference, embedder)?;
        }
        let n = text_cells.len();
        let kind = ColumnKind::Text;
        for (metric, total) in [("rouge1_recall", r), ("rouge1_precision", p), ("rouge1_f1", f), ("cos_sim", c)] {
            lines.push(MetricLine { metric, kind, value: total / n as f64, cells: n });
        }
    }
    if lines.is_empty() {
        return Err(Error::UndefinedMetric("no masked cell to evaluate".into()));
    }
    Ok(lines)
}

/// Machine-readable lines followed by a `#`-prefixed summary table.
pub fn render_report(lines: &[MetricLine]) -> String {
    let mut s = String::new();
    for l in lines {
        let _ = writeln!(s, "{},{},{}", l.metric, l.kind, l.value);
    }
    let _ = writeln!(s, "# {:<18} {:<12} {:>10} {:>6}", "metric", "kind", "value", "cells");
    for l in lines {
        let _ = writeln!(s, "# {:<18} {:<12} {:>10.4} {:>6}", l.metric, l.kind.as_str(), l.value, l.cells);
    }
    s
}
