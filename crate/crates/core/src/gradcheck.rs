//! End-to-end gradient check of the chunk loss against central differences.

use crate::autodiff::{central_difference, relative_error, Tape};
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::model::{chunk_loss, vocab_for, ChunkInputs, ModelConfig, PromptCache, UnimpModel};
use crate::scaler::Scalers;
use crate::table::{Cell, ColumnKind, Table};

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are judged on absolute error.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub worst: f64,
    /// Parameter name and entry index of the worst error.
    pub worst_at: (String, usize),
}

/// 3 × 3 table with one numerical, one categorical and one text column.
pub fn sample_table() -> Table {
    Table::new(
        vec!["age".into(), "city".into(), "note".into()],
        vec![ColumnKind::Numerical, ColumnKind::Categorical, ColumnKind::Text],
        vec![
            vec![Cell::Number(31.0), Cell::Category("paris".into()), Cell::Text("blue sky".into())],
            vec![Cell::Number(47.0), Cell::Category("rome".into()), Cell::Text("red".into())],
            vec![Cell::Number(38.5), Cell::Category("paris".into()), Cell::Text("blue".into())],
        ],
    )
    .expect("valid table")
}

/// Checks every trainable entry of a model of width `dim` with `layers`
/// BiHMP layers on [`sample_table`], hiding one cell of each kind.
pub fn run(dim: usize, layers: usize, seed: u64) -> Result<GradcheckReport> {
    let t = sample_table();
    let model = UnimpModel::new(vocab_for(&[&t]), ModelConfig { dim, layers, seed })?;
    let scalers = Scalers::fit(&t, &t.observed_mask())?;
    let chunk = ChunkInputs::new(&model.encoder, t.clone(), &scalers)?;
    let mut visible = MaskMatrix::all_observed(3, 3);
    visible.set(0, 0, false);
    visible.set(1, 1, false);
    visible.set(2, 2, false);

    let loss_of = |m: &UnimpModel| -> Result<f64> {
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let loss = chunk_loss(m, &tape, &bound, &chunk, &scalers, &visible, 1.0, &mut PromptCache::new(0))?
            .ok_or_else(|| Error::Contract("gradient check has no target".into()))?;
        Ok(loss.value().item())
    };
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let loss = chunk_loss(&model, &tape, &bound, &chunk, &scalers, &visible, 1.0, &mut PromptCache::new(0))?
        .ok_or_else(|| Error::Contract("gradient check has no target".into()))?;
    let grads = tape.backward(loss)?;

    let mut report = GradcheckReport {
        checked: 0,
        worst: 0.0,
        worst_at: (String::new(), 0),
    };
    let mut probe = model.clone();
    for (p, var) in bound.vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut flat = model.params.get(p).value.data().to_vec();
        for k in 0..flat.len() {
            let mut failure = None;
            let numeric = central_difference(&mut flat, k, STEP, |x| {
                probe.params.get_mut(p).value.data_mut().copy_from_slice(x);
                loss_of(&probe).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            });
            if let Some(e) = failure {
                return Err(e);
            }
            probe.params.get_mut(p).value.data_mut().copy_from_slice(&flat);
            let err = relative_error(analytic.data()[k], numeric, FLOOR);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("gradient check at {}[{k}]", model.params.get(p).name)));
            }
            if err > report.worst {
                report.worst = err;
                report.worst_at = (model.params.get(p).name.clone(), k);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
