use super::WaveRecord;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleVerdict {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstabilityVerdict {
    pub verdict: OracleVerdict,
    /// Fitted exponential growth rate of the oscillation envelope, 1/s.
    pub growth_rate: f64,
    /// Trailing-window oscillation is negligible.
    pub settled: bool,
}

/// Growth-rate threshold separating the verdicts, 1/s.
pub const RATE_THRESHOLD: f64 = 2.0;

/// Trailing oscillation rms, relative to `1 + dc level`, above which a
/// non-growing record is read as a saturated limit cycle.
pub const LIMIT_CYCLE_RATIO: f64 = 0.1;

/// Fit an exponential envelope to the ac part of the grid current.
///
/// The record is cut into windows of length `window`; in each window the
/// window mean is removed from both grid-current channels and the rms of
/// what is left is taken. A least-squares line through `ln(rms)` over the
/// trailing windows (at most the last six) gives the growth rate.
pub fn detect_instability(w: &WaveRecord, window: f64) -> Result<InstabilityVerdict> {
    let n_win = (window * w.sample_rate).round() as usize;
    let channels: Vec<&[f64]> = ["igd_A", "igq_A"]
        .iter()
        .filter_map(|n| w.channel(n))
        .collect();
    if channels.is_empty() {
        return Err(Error::param("record", "no grid-current channels"));
    }
    if w.divergent {
        return Ok(InstabilityVerdict {
            verdict: OracleVerdict::Unstable,
            growth_rate: f64::INFINITY,
            settled: false,
        });
    }
    let len = channels[0].len();
    if n_win < 2 || len < 3 * n_win {
        return Err(Error::param(
            "record",
            format!("need at least 3 windows of {n_win} samples, have {len}"),
        ));
    }
    let count = len / n_win;
    let first = len - count * n_win;
    let mut rms = Vec::with_capacity(count);
    let mut level = 0.0f64;
    for k in 0..count {
        let seg = first + k * n_win..first + (k + 1) * n_win;
        let mut acc = 0.0;
        for c in &channels {
            let s = &c[seg.clone()];
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            level = level.max(mean.abs());
            acc += s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s.len() as f64;
        }
        rms.push(acc.sqrt());
    }
    let floor = 1e-6 * (1.0 + level);
    let tail = rms.len().min(6);
    let pts: Vec<(f64, f64)> = rms[rms.len() - tail..]
        .iter()
        .enumerate()
        .map(|(k, r)| (k as f64 * window, r.max(floor).ln()))
        .collect();
    let rate = slope(&pts);
    let last = *rms.last().expect("at least three windows");
    let settled = last <= 1e-3 * (1.0 + level);
    let verdict = if rate > RATE_THRESHOLD || last > LIMIT_CYCLE_RATIO * (1.0 + level) {
        OracleVerdict::Unstable
    } else if rate < -RATE_THRESHOLD || settled {
        OracleVerdict::Stable
    } else {
        OracleVerdict::Inconclusive
    };
    Ok(InstabilityVerdict {
        verdict,
        growth_rate: rate,
        settled,
    })
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
