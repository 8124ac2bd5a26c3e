//! Missingness simulation (MCAR, logistic MAR and self-masking MNAR) and the
//! progressive training mask.

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::scaler::Scalers;
use crate::table::Table;

/// Default extra-mask ratio at the first epoch.
pub const DEFAULT_KAPPA: f64 = 0.35;
/// Growth of the extra-mask ratio between the first and the last epoch.
pub const PROGRESSIVE_SPAN: f64 = 0.30;

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "mnar" => Ok(Mechanism::Mnar),
            other => Err(Error::param("mechanism", format!("unknown mechanism `{other}`"))),
        }
    }
}

/// How logistic weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogisticWeights {
    /// Seeded uniform draws in [-1, 1].
    Random,
    /// Every weight fixed to the given value.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissSpec {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
    pub cause_fraction: f64,
    pub weights: LogisticWeights,
}

impl MissSpec {
    pub fn new(mechanism: Mechanism, rate: f64, seed: u64) -> Self {
        MissSpec {
            mechanism,
            rate,
            seed,
            cause_fraction: 0.3,
            weights: LogisticWeights::Random,
        }
    }

    fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        if self.mechanism == Mechanism::Mar && !(self.cause_fraction > 0.0 && self.cause_fraction < 1.0) {
            return Err(Error::param("cause_fraction", format!("{} is outside (0, 1)", self.cause_fraction)));
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::param("rate", format!("{rate} is outside (0, 1)")))
    }
}

/// Dense `n × d` view of a table on the [0, 1] scale (`None` for missing or
/// text cells), which is what the logistic mechanisms consume.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitMatrix {
    n: usize,
    d: usize,
    values: Vec<Option<f64>>,
}

impl UnitMatrix {
    /// From a raw (unscaled) table and fitted scalers.
    pub fn from_table(t: &Table, scalers: &Scalers) -> Self {
        let values = (0..t.n())
            .flat_map(|i| (0..t.d()).map(move |j| (i, j)))
            .map(|(i, j)| scalers.raw_unit_value(j, t.cell(i, j)))
            .collect();
        UnitMatrix {
            n: t.n(),
            d: t.d(),
            values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("unit matrix rows must be non-empty and equal length".into()));
        }
        Ok(UnitMatrix {
            n,
            d,
            values: rows.iter().flatten().map(|v| Some(*v)).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.d + j]
    }
}

pub fn mask_mcar(n: usize, d: usize, rate: f64, seed: u64) -> Result<MaskMatrix> {
    check_rate(rate)?;
    if n == 0 || d == 0 {
        return Err(Error::param("shape", format!("{n}x{d} has a zero dimension")));
    }
    let mut rng = rng_for(seed);
    let bits = (0..n * d).map(|_| rng.gen::<f64>() >= rate).collect();
    MaskMatrix::from_bits(n, d, bits)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intercept `b` such that the mean of `sigmoid(logit + b)` equals `rate`.
pub fn calibrate_intercept(logits: &[f64], rate: f64) -> f64 {
    let mean_prob = |b: f64| logits.iter().map(|z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn draw_weight(rng: &mut ChaCha8Rng, weights: LogisticWeights) -> f64 {
    match weights {
        LogisticWeights::Random => rng.gen_range(-1.0..=1.0),
        LogisticWeights::Constant(w) => w,
    }
}

/// Bernoulli-masks column `j` using per-row logits calibrated to `rate`.
fn mask_column(mask: &mut MaskMatrix, j: usize, logits: &[f64], rate: f64, rng: &mut ChaCha8Rng) {
    let b = calibrate_intercept(logits, rate);
    for (i, z) in logits.iter().enumerate() {
        if rng.gen::<f64>() < sigmoid(z + b) {
            mask.set(i, j, false);
        }
    }
}

/// Number of fully observed cause columns used by [`mask_mar`].
pub fn cause_count(d: usize, cause_fraction: f64) -> usize {
    ((cause_fraction * d as f64).ceil() as usize).clamp(1, d - 1)
}

/// Logistic MAR: a seeded subset of cause columns stays fully observed and
/// drives the missingness probability of every other column.
pub fn mask_mar(values: &UnitMatrix, spec: &MissSpec) -> Result<MaskMatrix> {
    spec.validate()?;
    let (n, d) = (values.n(), values.d());
    if d < 2 {
        return Err(Error::Unsupported("MAR needs at least two columns".into()));
    }
    let mut rng = rng_for(spec.seed);
    let k = cause_count(d, spec.cause_fraction);
    let mut causes = index::sample(&mut rng, d, k).into_vec();
    causes.sort_unstable();

    let mut mask = MaskMatrix::all_observed(n, d);
    for j in (0..d).filter(|j| !causes.contains(j)) {
        let w: Vec<f64> = causes.iter().map(|_| draw_weight(&mut rng, spec.weights)).collect();
        let logits: Vec<f64> = (0..n)
            .map(|i| {
                causes
                    .iter()
                    .zip(&w)
                    .map(|(&c, wc)| wc * values.get(i, c).unwrap_or(0.0))
                    .sum()
            })
            .collect();
        mask_column(&mut mask, j, &logits, spec.rate, &mut rng);
    }
    Ok(mask)
}

/// Columns kept fully observed by [`mask_mar`] for this spec.
pub fn mar_causes(d: usize, spec: &MissSpec) -> Vec<usize> {
    let mut rng = rng_for(spec.seed);
    let mut causes = index::sample(&mut rng, d, cause_count(d, spec.cause_fraction)).into_vec();
    causes.sort_unstable();
    causes
}

/// Logistic self-masking MNAR: each cell's own value drives its missingness.
pub fn mask_mnar(values: &UnitMatrix, spec: &MissSpec) -> Result<MaskMatrix> {
    spec.validate()?;
    let (n, d) = (values.n(), values.d());
    let mut rng = rng_for(spec.seed);
    let mut mask = MaskMatrix::all_observed(n, d);
    for j in 0..d {
        let w = draw_weight(&mut rng, spec.weights);
        let logits: Vec<f64> = (0..n).map(|i| w * values.get(i, j).unwrap_or(0.0)).collect();
        mask_column(&mut mask, j, &logits, spec.rate, &mut rng);
    }
    Ok(mask)
}

pub fn simulate(values: &UnitMatrix, spec: &MissSpec) -> Result<MaskMatrix> {
    match spec.mechanism {
        Mechanism::Mcar => mask_mcar(values.n(), values.d(), spec.rate, spec.seed),
        Mechanism::Mar => mask_mar(values, spec),
        Mechanism::Mnar => mask_mnar(values, spec),
    }
}

/// `kappa + (epoch / epochs) * 0.30`; `epochs == 0` yields `kappa`.
pub fn progressive_ratio(kappa: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        kappa
    } else {
        kappa + (epoch as f64 / epochs as f64) * PROGRESSIVE_SPAN
    }
}

/// Masks `floor(ratio * observed)` randomly chosen observed entries of `m`.
pub fn mask_fraction_of_observed(m: &MaskMatrix, ratio: f64, seed: u64) -> Result<MaskMatrix> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::param("ratio", format!("progressive ratio {ratio} is outside [0, 1)")));
    }
    let observed: Vec<usize> = m
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, b)| **b)
        .map(|(k, _)| k)
        .collect();
    let count = (ratio * observed.len() as f64 + 1e-9).floor() as usize;
    let mut rng = rng_for(seed);
    let mut bits = m.bits().to_vec();
    for pick in index::sample(&mut rng, observed.len(), count) {
        bits[observed[pick]] = false;
    }
    MaskMatrix::from_bits(m.n(), m.d(), bits)
}

/// Progressive mask for one epoch, drawn fresh from the base mask `m`.
pub fn progressive_mask(
    m: &MaskMatrix,
    kappa: f64,
    epoch: usize,
    epochs: usize,
    seed: u64,
) -> Result<MaskMatrix> {
    if epoch > epochs {
        return Err(Error::param("epoch", format!("{epoch} exceeds epochs {epochs}")));
    }
    if kappa < 0.0 {
        return Err(Error::param("kappa", format!("{kappa} is negative")));
    }
    let r = progressive_ratio(kappa, epoch, epochs);
    if r >= 1.0 {
        return Err(Error::param("kappa", format!("ratio {r} reaches 1")));
    }
    mask_fraction_of_observed(m, r, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_rate_leaves_everything_observed() {
        let m = mask_mcar(10, 10, 1e-12, 3).unwrap();
        assert_eq!(m.count_observed(), 100);
    }

    #[test]
    fn mcar_rejects_rates_outside_unit_interval() {
        assert!(mask_mcar(3, 3, 0.0, 1).is_err());
        assert!(mask_mcar(3, 3, 1.0, 1).is_err());
        assert!(mask_mcar(3, 3, 1.5, 1).is_err());
    }

    #[test]
    fn mcar_is_deterministic_and_near_rate() {
        let a = mask_mcar(100, 100, 0.2, 42).unwrap();
        assert_eq!(a, mask_mcar(100, 100, 0.2, 42).unwrap());
        let f = a.missing_fraction();
        assert!((0.185..=0.215).contains(&f), "{f}");
    }

    #[test]
    fn calibration_hits_target_mean() {
        let logits: Vec<f64> = (0..100).map(|i| (i as f64 / 10.0).sin() * 3.0).collect();
        let b = calibrate_intercept(&logits, 0.2);
        let mean = logits.iter().map(|z| sigmoid(z + b)).sum::<f64>() / 100.0;
        assert!((mean - 0.2).abs() < 1e-4);
    }

    fn ramp(n: usize, d: usize) -> UnitMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| ((i * (j + 1)) % n) as f64 / n as f64).collect())
            .collect();
        UnitMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn mar_keeps_causes_observed() {
        let v = ramp(1000, 5);
        let spec = MissSpec::new(Mechanism::Mar, 0.2, 9);
        let m = mask_mar(&v, &spec).unwrap();
        let causes = mar_causes(5, &spec);
        assert_eq!(causes.len(), 2);
        for &c in &causes {
            assert!((0..1000).all(|i| m.is_observed(i, c)));
        }
    }

    #[test]
    fn mar_with_zero_weights_is_mcar_on_non_causes() {
        let v = ramp(2000, 4);
        let mut spec = MissSpec::new(Mechanism::Mar, 0.25, 1);
        spec.weights = LogisticWeights::Constant(0.0);
        let m = mask_mar(&v, &spec).unwrap();
        let causes = mar_causes(4, &spec);
        let (mut miss, mut total) = (0, 0);
        for j in (0..4).filter(|j| !causes.contains(j)) {
            for i in 0..2000 {
                total += 1;
                miss += usize::from(!m.is_observed(i, j));
            }
        }
        let f = miss as f64 / total as f64;
        assert!((f - 0.25).abs() < 0.03, "{f}");
    }

    #[test]
    fn mar_rejects_single_column() {
        let v = ramp(10, 1);
        let spec = MissSpec::new(Mechanism::Mar, 0.2, 1);
        assert!(matches!(mask_mar(&v, &spec), Err(Error::Unsupported(_))));
    }

    #[test]
    fn mnar_constant_column_gets_constant_probability() {
        let rows = vec![vec![0.4]; 10];
        let logits: Vec<f64> = rows.iter().map(|r| 0.7 * r[0]).collect();
        let b = calibrate_intercept(&logits, 0.2);
        assert!((sigmoid(logits[0] + b) - 0.2).abs() < 1e-9);
        let v = UnitMatrix::from_rows(&rows).unwrap();
        let spec = MissSpec::new(Mechanism::Mnar, 0.2, 5);
        assert_eq!(mask_mnar(&v, &spec).unwrap(), mask_mnar(&v, &spec).unwrap());
    }

    #[test]
    fn mnar_positive_weight_masks_high_values_more() {
        let rows: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64 / 999.0]).collect();
        let v = UnitMatrix::from_rows(&rows).unwrap();
        let mut spec = MissSpec::new(Mechanism::Mnar, 0.2, 11);
        spec.weights = LogisticWeights::Constant(1.0);
        let m = mask_mnar(&v, &spec).unwrap();
        let low = (0..500).filter(|&i| !m.is_observed(i, 0)).count();
        let high = (500..1000).filter(|&i| !m.is_observed(i, 0)).count();
        assert!(high >= low, "high {high} low {low}");
    }

    #[test]
    fn progressive_endpoints() {
        assert_eq!(progressive_ratio(0.35, 0, 10), 0.35);
        assert!((progressive_ratio(0.35, 10, 10) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn progressive_counts_exactly() {
        let m = MaskMatrix::all_observed(100, 10);
        let p = progressive_mask(&m, 0.35, 0, 10, 7).unwrap();
        assert_eq!(p.count_missing(), 350);
        assert!(p.is_subset_of(&m));
    }

    #[test]
    fn progressive_rejects_full_ratio() {
        let m = MaskMatrix::all_observed(2, 2);
        assert!(progressive_mask(&m, 0.75, 5, 5, 0).is_err());
        assert!(progressive_mask(&m, 0.35, 6, 5, 0).is_err());
    }
}
