//! Correlation power analysis over a [`TraceSet`].
//!
//! Statistics are two-pass (means first, then centered products) with `f64`
//! accumulators. Work is split over blocks of columns, and each block walks the
//! rows in order, so results do not depend on the thread count.

use rayon::prelude::*;
use thiserror::Error;

use crate::traceio::TraceSet;

const COLUMN_BLOCK: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum CpaError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("hypothesis has {hypothesis} values for {traces} traces")]
    LengthMismatch { hypothesis: usize, traces: usize },
}

/// Predicted leakage, one value per trace.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisVector(pub Vec<f64>);

impl HypothesisVector {
    /// `64` where the mask is all ones, `0` otherwise.
    pub fn from_bits(bits: impl IntoIterator<Item = bool>) -> Self {
        Self(bits.into_iter().map(|b| if b { 64.0 } else { 0.0 }).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTrace(pub Vec<f64>);

impl CorrelationTrace {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, CpaError> {
    if x.len() != y.len() {
        return Err(CpaError::DegenerateInput(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(CpaError::DegenerateInput("need at least two points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CpaError::DegenerateInput("constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of every column against `hypothesis`.
///
/// Zero-variance columns map to 0. A constant hypothesis is rejected.
pub fn correlation_trace(traces: &TraceSet, hypothesis: &HypothesisVector) -> Result<CorrelationTrace, CpaError> {
    let h = &hypothesis.0;
    let (n, width) = (traces.n_traces(), traces.n_samples());
    if h.len() != n {
        return Err(CpaError::LengthMismatch { hypothesis: h.len(), traces: n });
    }
    if n < 2 {
        return Err(CpaError::DegenerateInput("need at least two traces".into()));
    }
    let mh = mean(h);
    let hc: Vec<f64> = h.iter().map(|v| v - mh).collect();
    let shh: f64 = hc.iter().map(|v| v * v).sum();
    if shh == 0.0 {
        return Err(CpaError::DegenerateInput("constant hypothesis".into()));
    }

    let mut corr = vec![0.0; width];
    corr.par_chunks_mut(COLUMN_BLOCK).enumerate().for_each(|(block, out)| {
        let lo = block * COLUMN_BLOCK;
        let hi = lo + out.len();
        let mut means = vec![0.0f64; out.len()];
        for row in traces.rows() {
            for (m, &s) in means.iter_mut().zip(&row[lo..hi]) {
                *m += s as f64;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        let mut sxy = vec![0.0f64; out.len()];
        let mut sxx = vec![0.0f64; out.len()];
        for (row, &dh) in traces.rows().zip(&hc) {
            for (j, &s) in row[lo..hi].iter().enumerate() {
                let dx = s as f64 - means[j];
                sxy[j] += dx * dh;
                sxx[j] += dx * dx;
            }
        }
        for (j, c) in out.iter_mut().enumerate() {
            *c = if sxx[j] == 0.0 { 0.0 } else { (sxy[j] / (sxx[j].sqrt() * shh.sqrt())).clamp(-1.0, 1.0) };
        }
    });
    Ok(CorrelationTrace(corr))
}

/// Indices of the `count` largest `|corr|`, descending; ties go to the lower index.
pub fn find_poi(corr: &CorrelationTrace, count: usize) -> Vec<usize> {
    find_poi_in(corr, 0..corr.len(), count)
}

/// [`find_poi`] restricted to a window of sample indices.
pub fn find_poi_in(corr: &CorrelationTrace, window: std::ops::Range<usize>, count: usize) -> Vec<usize> {
    let end = window.end.min(corr.len());
    let mut idx: Vec<usize> = (window.start.min(end)..end).collect();
    idx.sort_by(|&a, &b| corr.0[b].abs().total_cmp(&corr.0[a].abs()).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}
