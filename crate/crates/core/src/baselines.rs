//! Reference imputers: column mean / mode and k-nearest-neighbour imputation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::scaler::Scalers;
use crate::table::{Cell, ColumnKind, Table};

/// Per-column fill values computed from visible cells.
fn column_fills(t: &Table, visible: &MaskMatrix) -> Result<Vec<Cell>> {
    (0..t.d())
        .map(|j| {
            let cells: Vec<&Cell> = (0..t.n())
                .filter(|&i| visible.is_observed(i, j))
                .map(|i| t.cell(i, j))
                .filter(|c| !c.is_missing())
                .collect();
            if cells.is_empty() {
                return Err(Error::UnscalableColumn(t.names()[j].clone()));
            }
            Ok(match t.kind(j) {
                ColumnKind::Numerical => {
                    let sum: f64 = cells
                        .iter()
                        .map(|c| match c {
                            Cell::Number(v) => *v,
                            _ => 0.0,
                        })
                        .sum();
                    Cell::Number(sum / cells.len() as f64)
                }
                _ => most_frequent(cells.iter().map(|c| c.render())),
            })
        })
        .collect()
}

/// Most frequent value; ties go to the value seen first.
fn most_frequent<I: Iterator<Item = String>>(values: I) -> Cell {
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for v in values {
        let c = counts.entry(v.clone()).or_insert(0);
        if *c == 0 {
            order.push(v);
        }
        *c += 1;
    }
    let mut best = &order[0];
    for v in &order {
        if counts[v] > counts[best] {
            best = v;
        }
    }
    Cell::Category(best.clone())
}

fn as_kind(cell: Cell, kind: ColumnKind) -> Cell {
    match (cell, kind) {
        (Cell::Category(s), ColumnKind::Text) => Cell::Text(s),
        (c, _) => c,
    }
}

/// Numerical cells get the observed column mean; categorical the mode
/// (ties to the label seen first, i.e. the smallest label id); text the most
/// frequent observed string.
pub fn impute_mean_mode(t: &Table, mask: &MaskMatrix) -> Result<Table> {
    t.check_mask(mask)?;
    let visible = mask.intersect(&t.observed_mask())?;
    let fills = column_fills(t, &visible)?;
    t.map_cells(|i, j, cell| {
        Ok(if visible.is_observed(i, j) {
            cell.clone()
        } else {
            as_kind(fills[j].clone(), t.kind(j))
        })
    })
}

/// Row distance over co-observed numerical/categorical columns on the unit
/// scale: `sqrt(Σ diff² / count)`; `None` without a shared column.
pub fn row_distance(units: &[Vec<Option<f64>>], a: usize, b: usize) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (x, y) in units[a].iter().zip(&units[b]) {
        if let (Some(x), Some(y)) = (x, y) {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    (count > 0).then(|| (sum / count as f64).sqrt())
}

/// k-nearest-neighbour imputation. Donors for cell `(i, j)` are rows with a
/// visible value in column `j` and at least one co-observed scalar column;
/// the `k` closest (ties to the lower row index) are weighted by
/// `1 / (dist + 1e-8)`. Numerical cells take the weighted mean, categorical
/// cells the weighted vote, text cells the nearest donor's value. Cells
/// without donors fall back to mean / mode.
pub fn impute_knni(t: &Table, mask: &MaskMatrix, k: usize) -> Result<Table> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    t.check_mask(mask)?;
    let visible = mask.intersect(&t.observed_mask())?;
    let fills = column_fills(t, &visible)?;
    let scalers = Scalers::fit(t, &visible)?;
    let units: Vec<Vec<Option<f64>>> = (0..t.n())
        .map(|i| {
            (0..t.d())
                .map(|j| {
                    if visible.is_observed(i, j) && t.kind(j).is_scalar() {
                        scalers.raw_unit_value(j, t.cell(i, j))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    let mut rows: Vec<Vec<Cell>> = t.rows().map(<[Cell]>::to_vec).collect();
    for i in 0..t.n() {
        let mut dists: Option<Vec<(usize, f64)>> = None;
        for j in 0..t.d() {
            if visible.is_observed(i, j) {
                continue;
            }
            let all = dists.get_or_insert_with(|| {
                let mut d: Vec<(usize, f64)> = (0..t.n())
                    .filter(|&r| r != i)
                    .filter_map(|r| row_distance(&units, i, r).map(|d| (r, d)))
                    .collect();
                d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                d
            });
            let donors: Vec<(usize, f64)> = all
                .iter()
                .filter(|(r, _)| visible.is_observed(*r, j))
                .take(if t.kind(j) == ColumnKind::Text { 1 } else { k })
                .copied()
                .collect();
            rows[i][j] = if donors.is_empty() {
                as_kind(fills[j].clone(), t.kind(j))
            } else {
                knn_value(t, j, &donors)
            };
        }
    }
    Table::new(t.names().to_vec(), t.kinds().to_vec(), rows)
}

fn knn_value(t: &Table, j: usize, donors: &[(usize, f64)]) -> Cell {
    let raw: Vec<f64> = donors.iter().map(|(_, d)| 1.0 / (d + 1e-8)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    match t.kind(j) {
        ColumnKind::Numerical => {
            let mut v = 0.0;
            for ((r, _), w) in donors.iter().zip(&weights) {
                if let Cell::Number(x) = t.cell(*r, j) {
                    v += w * x;
                }
            }
            Cell::Number(v)
        }
        ColumnKind::Categorical => {
            let mut order: Vec<String> = Vec::new();
            let mut votes: HashMap<String, f64> = HashMap::new();
            for ((r, _), w) in donors.iter().zip(&weights) {
                let label = t.cell(*r, j).render();
                if !votes.contains_key(&label) {
                    order.push(label.clone());
                }
                *votes.entry(label).or_insert(0.0) += w;
            }
            let mut best = &order[0];
            for l in &order {
                if votes[l] > votes[best] {
                    best = l;
                }
            }
            Cell::Category(best.clone())
        }
        ColumnKind::Text => t.cell(donors[0].0, j).clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{mask_mcar, rng_for};
    use rand::Rng;

    fn num(v: &[Option<f64>]) -> Vec<Cell> {
        v.iter().map(|x| x.map_or(Cell::Missing, Cell::Number)).collect()
    }

    #[test]
    fn mean_of_observed() {
        let t = Table::new(
            vec!["x".into()],
            vec![ColumnKind::Numerical],
            vec![num(&[Some(1.0)]), num(&[Some(2.0)]), num(&[None])],
        )
        .unwrap();
        let out = impute_mean_mode(&t, &t.observed_mask()).unwrap();
        assert_eq!(out.cell(2, 0), &Cell::Number(1.5));
    }

    fn cats(labels: &[&str]) -> Table {
        Table::new(
            vec!["c".into()],
            vec![ColumnKind::Categorical],
            labels
                .iter()
                .map(|l| vec![if l.is_empty() { Cell::Missing } else { Cell::Category(l.to_string()) }])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mode_and_tie_rule() {
        let t = cats(&["a", "a", "b", ""]);
        assert_eq!(impute_mean_mode(&t, &t.observed_mask()).unwrap().cell(3, 0), &Cell::Category("a".into()));
        let t = cats(&["b", "a", "a", "b", ""]);
        assert_eq!(impute_mean_mode(&t, &t.observed_mask()).unwrap().cell(4, 0), &Cell::Category("b".into()));
    }

    #[test]
    fn fully_missing_column_is_an_error() {
        let t = cats(&["", ""]);
        assert!(impute_mean_mode(&t, &t.observed_mask()).is_err());
    }

    #[test]
    fn text_mode_keeps_kind() {
        let t = Table::new(
            vec!["s".into()],
            vec![ColumnKind::Text],
            vec![vec![Cell::Text("hi there".into())], vec![Cell::Missing]],
        )
        .unwrap();
        assert_eq!(impute_mean_mode(&t, &t.observed_mask()).unwrap().cell(1, 0), &Cell::Text("hi there".into()));
    }

    #[test]
    fn duplicate_donor_is_copied_exactly() {
        let t = Table::new(
            vec!["a".into(), "b".into()],
            vec![ColumnKind::Numerical; 2],
            vec![
                num(&[Some(0.1), Some(0.7123456789)]),
                num(&[Some(0.9), Some(0.2)]),
                num(&[Some(0.1), None]),
                num(&[Some(0.5), Some(0.3)]),
            ],
        )
        .unwrap();
        let out = impute_knni(&t, &t.observed_mask(), 1).unwrap();
        assert_eq!(out.cell(2, 1), &Cell::Number(0.7123456789));
        let out3 = impute_knni(&t, &t.observed_mask(), 3).unwrap();
        if let Cell::Number(v) = out3.cell(2, 1) {
            assert!((v - 0.7123456789).abs() < 1e-7);
        }
    }

    #[test]
    fn equal_distances_reduce_to_mean() {
        // the anchor column is constant so every donor is at distance 0
        let t = Table::new(
            vec!["a".into(), "b".into()],
            vec![ColumnKind::Numerical; 2],
            vec![
                num(&[Some(1.0), Some(1.0)]),
                num(&[Some(1.0), Some(2.0)]),
                num(&[Some(1.0), Some(6.0)]),
                num(&[Some(1.0), None]),
            ],
        )
        .unwrap();
        let out = impute_knni(&t, &t.observed_mask(), 10).unwrap();
        if let Cell::Number(v) = out.cell(3, 1) {
            assert!((v - 3.0).abs() < 1e-12);
        } else {
            panic!("not a number");
        }
    }

    /// Exhaustive donor search written independently of the library loop.
    fn oracle(t: &Table, m: &MaskMatrix, k: usize) -> Vec<Vec<f64>> {
        let n = t.n();
        let d = t.d();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        let val = |i: usize, j: usize| match t.cell(i, j) {
            Cell::Number(v) if m.is_observed(i, j) => Some(*v),
            _ => None,
        };
        for i in 0..n {
            for j in 0..d {
                if let Some(v) = val(i, j) {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        let unit = |j: usize, v: f64| if hi[j] > lo[j] { (v - lo[j]) / (hi[j] - lo[j]) } else { 0.0 };
        let mut out = vec![vec![0.0; d]; n];
        for i in 0..n {
            for j in 0..d {
                if let Some(v) = val(i, j) {
                    out[i][j] = v;
                    continue;
                }
                let mut cands = Vec::new();
                for r in 0..n {
                    if r == i || val(r, j).is_none() {
                        continue;
                    }
                    let mut s = 0.0;
                    let mut c = 0;
                    for q in 0..d {
                        if let (Some(a), Some(b)) = (val(i, q), val(r, q)) {
                            s += (unit(q, a) - unit(q, b)).powi(2);
                            c += 1;
                        }
                    }
                    if c > 0 {
                        cands.push(((s / c as f64).sqrt(), r));
                    }
                }
                cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cands.truncate(k);
                let ws: Vec<f64> = cands.iter().map(|(dd, _)| 1.0 / (dd + 1e-8)).collect();
                let tot: f64 = ws.iter().sum();
                out[i][j] = cands.iter().zip(&ws).map(|((_, r), w)| w / tot * val(*r, j).unwrap()).sum();
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = rng_for(21);
        let rows: Vec<Vec<Cell>> = (0..20)
            .map(|_| (0..4).map(|_| Cell::Number(rng.gen_range(0.0..10.0))).collect())
            .collect();
        let t = Table::new((0..4).map(|j| format!("c{j}")).collect(), vec![ColumnKind::Numerical; 4], rows).unwrap();
        let m = mask_mcar(20, 4, 0.25, 3).unwrap();
        let out = impute_knni(&t, &m, 3).unwrap();
        let expect = oracle(&t, &m, 3);
        for i in 0..20 {
            for j in 0..4 {
                assert_eq!(out.cell(i, j), &Cell::Number(expect[i][j]), "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn observed_cells_untouched_and_deterministic() {
        let mut rng = rng_for(5);
        let rows: Vec<Vec<Cell>> = (0..15)
            .map(|_| {
                vec![
                    Cell::Number(rng.gen_range(0.0..1.0)),
                    Cell::Category(["u", "v", "w"][rng.gen_range(0..3)].into()),
                    Cell::Text(["p q", "r"][rng.gen_range(0..2)].into()),
                ]
            })
            .collect();
        let t = Table::new(
            vec!["x".into(), "c".into(), "s".into()],
            vec![ColumnKind::Numerical, ColumnKind::Categorical, ColumnKind::Text],
            rows,
        )
        .unwrap();
        let m = mask_mcar(15, 3, 0.3, 8).unwrap();
        for out in [impute_knni(&t, &m, 3).unwrap(), impute_mean_mode(&t, &m).unwrap()] {
            for i in 0..15 {
                for j in 0..3 {
                    if m.is_observed(i, j) {
                        assert_eq!(out.cell(i, j), t.cell(i, j));
                    } else {
                        assert!(!out.cell(i, j).is_missing());
                    }
                }
            }
        }
        assert_eq!(impute_knni(&t, &m, 3).unwrap(), impute_knni(&t, &m, 3).unwrap());
    }
}
