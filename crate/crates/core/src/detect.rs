//! Poisoned-model detection from per-class reversed-trigger sizes.
//!
//! Target classes of a backdoor need unusually small triggers, so they show
//! up as low outliers among the class norms. Deviations are measured from
//! the median of all norms, but the spread is estimated only from classes
//! *below* the median: classes whose trigger search failed to converge
//! produce inflated norms that would otherwise widen the spread.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CONFIDENCE: f64 = 0.99;

/// Inverse standard normal CDF using Acklam's rational approximation
/// (relative error below 1.2e-9 over the open unit interval).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.02425;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MadStats {
    pub median: f64,
    /// `|norm_i − median|` for every class.
    pub deviations: Vec<f64>,
    /// Classes with norm strictly below the median.
    pub below_median: Vec<usize>,
    pub mad: f64,
    pub sigma: f64,
    /// Set when the spread is zero and no index can be formed.
    pub degenerate: bool,
}

/// Consistency factor turning a MAD into a normal standard deviation.
pub fn mad_scale() -> f64 {
    1.0 / normal_quantile(0.75)
}

pub fn mad_sigma(norms: &[f64]) -> Result<MadStats> {
    if norms.len() < 4 {
        return Err(Error::invalid(format!(
            "need at least 4 class norms, got {}",
            norms.len()
        )));
    }
    if norms.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("norms must be finite and non-negative"));
    }
    let med = median(norms).expect("non-empty");
    let deviations: Vec<f64> = norms.iter().map(|v| (v - med).abs()).collect();
    let below_median: Vec<usize> = (0..norms.len()).filter(|&i| norms[i] < med).collect();
    let small: Vec<f64> = below_median.iter().map(|&i| deviations[i]).collect();
    let mad = median(&small).unwrap_or(0.0);
    let sigma = mad * mad_scale();
    Ok(MadStats {
        median: med,
        deviations,
        below_median,
        mad,
        sigma,
        degenerate: !(sigma > 0.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Clean,
    Poisoned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub norms: Vec<f64>,
    pub median: f64,
    pub mad: f64,
    pub sigma: f64,
    /// `Φ⁻¹((p + 1) / 2)`
    pub bound: f64,
    /// Anomaly index `d_i / σ` for below-median classes, `None` elsewhere.
    pub indices: Vec<Option<f64>>,
    pub flagged: Vec<usize>,
    pub verdict: Verdict,
    pub p: f64,
    pub degenerate: bool,
}

impl DetectionReport {
    pub fn is_poisoned(&self) -> bool {
        self.verdict == Verdict::Poisoned
    }
}

/// Flag below-median classes whose anomaly index exceeds the two-sided
/// normal bound at confidence `p`.
pub fn detect(norms: &[f64], p: f64) -> Result<DetectionReport> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("confidence {p} not in (0, 1)")));
    }
    let stats = mad_sigma(norms)?;
    let bound = normal_quantile((p + 1.0) / 2.0);
    let mut indices = vec![None; norms.len()];
    let mut flagged = Vec::new();
    if !stats.degenerate {
        for &i in &stats.below_median {
            let index = stats.deviations[i] / stats.sigma;
            indices[i] = Some(index);
            if index > bound {
                flagged.push(i);
            }
        }
    }
    Ok(DetectionReport {
        norms: norms.to_vec(),
        median: stats.median,
        mad: stats.mad,
        sigma: stats.sigma,
        bound,
        indices,
        verdict: if flagged.is_empty() {
            Verdict::Clean
        } else {
            Verdict::Poisoned
        },
        flagged,
        p,
        degenerate: stats.degenerate,
    })
}
