//! Overlap and agreement statistics.

use crate::error::{Error, Result};
use crate::volgrid::LabelMap;

/// Dice overlap for one label. `value` is `None` when both masks are empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceScore {
    pub label: u8,
    pub value: Option<f64>,
}

impl DiceScore {
    pub fn is_defined(&self) -> bool {
        self.value.is_some()
    }

    /// The score, with an undefined result mapped to `fallback`.
    pub fn or(&self, fallback: f64) -> f64 {
        self.value.unwrap_or(fallback)
    }
}

/// `2|A∩B| / (|A|+|B|)` for the voxels carrying `label`, from exact counts.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u8) -> Result<DiceScore> {
    a.geometry().check_same(b.geometry(), "dice operands")?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        let ia = x == label;
        let ib = y == label;
        na += ia as u64;
        nb += ib as u64;
        both += (ia && ib) as u64;
    }
    let value = (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64);
    Ok(DiceScore { label, value })
}

fn check_lengths(xs: &[f64], ys: &[f64], min: usize) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < min {
        return Err(Error::InvalidArgument(format!(
            "need at least {min} values, got {}",
            xs.len()
        )));
    }
    Ok(())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_lengths(xs, ys, 2)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate(
            "correlation is undefined for a constant input".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean absolute error.
pub fn mae(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_lengths(xs, ys, 1)?;
    Ok(xs.iter().zip(ys).map(|(x, y)| (x - y).abs()).sum::<f64>() / xs.len() as f64)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStat {
    pub mean: f64,
    pub stdv: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Result<SummaryStat> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot summarize an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SummaryStat {
        mean,
        stdv: var.sqrt(),
        count: values.len(),
    })
}
