//! Observed/missing indicator matrix and its CSV persistence (0/1, no header).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::table::write_atomic;

/// `n × d` indicator: `true` (1) means observed, `false` (0) means missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    d: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn all_observed(n: usize, d: usize) -> Self {
        MaskMatrix {
            n,
            d,
            bits: vec![true; n * d],
        }
    }

    pub fn from_bits(n: usize, d: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * d {
            return Err(Error::Shape(format!(
                "{} mask entries for a {n}x{d} shape",
                bits.len()
            )));
        }
        Ok(MaskMatrix { n, d, bits })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, observed: bool) {
        self.bits[i * self.d + j] = observed;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_missing(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn count_observed(&self) -> usize {
        self.bits.len() - self.count_missing()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.count_missing() as f64 / self.bits.len() as f64
    }

    /// Coordinates of every missing entry in row-major order.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| !**b)
            .map(|(k, _)| (k / self.d, k % self.d))
            .collect()
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> MaskMatrix {
        MaskMatrix {
            n: end - start,
            d: self.d,
            bits: self.bits[start * self.d..end * self.d].to_vec(),
        }
    }

    /// Entry-wise AND: missing in either input means missing in the output.
    pub fn intersect(&self, other: &MaskMatrix) -> Result<MaskMatrix> {
        if self.n != other.n || self.d != other.d {
            return Err(Error::Shape("mask shapes differ".into()));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(MaskMatrix {
            n: self.n,
            d: self.d,
            bits,
        })
    }

    /// True when every entry of `self` is at most the corresponding entry of `other`.
    pub fn is_subset_of(&self, other: &MaskMatrix) -> bool {
        self.n == other.n
            && self.d == other.d
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.n * (2 * self.d));
        for row in self.bits.chunks(self.d) {
            let line: Vec<&str> = row.iter().map(|b| if *b { "1" } else { "0" }).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<MaskMatrix> {
        let mut d = None;
        let mut bits = Vec::new();
        let mut n = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| match f.trim() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    other => Err(Error::Structure(format!(
                        "mask line {i}: `{other}` is not 0 or 1"
                    ))),
                })
                .collect::<Result<Vec<bool>>>()?;
            match d {
                None => d = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Structure(format!(
                        "mask line {i} has {} entries, expected {w}",
                        row.len()
                    )))
                }
                _ => {}
            }
            bits.extend(row);
            n += 1;
        }
        let d = d.ok_or(Error::EmptyInput)?;
        MaskMatrix::from_bits(n, d, bits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv_string().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MaskMatrix> {
        MaskMatrix::parse_csv(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let m = MaskMatrix::from_bits(2, 3, vec![true, false, true, false, false, true]).unwrap();
        assert_eq!(m.to_csv_string(), "1,0,1\n0,0,1\n");
        assert_eq!(MaskMatrix::parse_csv(&m.to_csv_string()).unwrap(), m);
    }

    #[test]
    fn rejects_ragged_and_bad_symbols() {
        assert!(MaskMatrix::parse_csv("1,0\n1\n").is_err());
        assert!(MaskMatrix::parse_csv("1,2\n").is_err());
    }

    #[test]
    fn subset_relation() {
        let a = MaskMatrix::from_bits(1, 2, vec![true, false]).unwrap();
        let b = MaskMatrix::all_observed(1, 2);
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
    }
}
