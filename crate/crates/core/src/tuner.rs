//! Margin-constrained damper design, surrogate datasets, and the
//! self-adaptive pipeline.

use std::fmt::Write as _;

mod adapt;

pub use adapt::{adapt, AdaptConfig, AdaptReport, TuningRecord, TuningSource};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::ann::{predict, Dataset, Hyper, MlpModel};
use crate::dqcore::{DqMatrix, FrequencyGrid};
use crate::plants::{gfl_admittance, sad_admittance, GflParams, SadParams};
use crate::simtime::{scan_admittance, DeviceUnderTest, ScanOptions};
use crate::stability::{assess, AnalysisOptions, BaseEigenCache, SystemModel, Verdict};
use crate::{Error, Result};

/// Grid of operating points for the damper-parameter dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatingGrid {
    pub i_d1: Vec<f64>,
    pub i_d2: Vec<f64>,
    /// `(L_g, R_g)` pairs.
    pub z_g: Vec<(f64, f64)>,
}

impl Default for OperatingGrid {
    fn default() -> Self {
        Self {
            i_d1: vec![0.0, 12.5, 25.0, 37.5, 50.0],
            i_d2: vec![0.0, 15.0, 30.0, 45.0, 60.0],
            z_g: [1.5e-3, 2.5e-3, 3.5e-3, 4.5e-3, 5.5e-3]
                .iter()
                .map(|&l| (l, 50.0 * l))
                .collect(),
        }
    }
}

impl OperatingGrid {
    pub fn validate(&self) -> Result<()> {
        if self.i_d1.is_empty() || self.i_d2.is_empty() || self.z_g.is_empty() {
            return Err(Error::param("grid", "every list must be nonempty"));
        }
        if self.z_g.iter().any(|&(l, r)| !(l > 0.0 && r > 0.0)) {
            return Err(Error::param("z_g", "L_g and R_g must be positive"));
        }
        Ok(())
    }

    /// Points in a fixed order: impedance outermost, then I_d1, then I_d2.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &(l_g, r_g) in &self.z_g {
            for &i_d1 in &self.i_d1 {
                for &i_d2 in &self.i_d2 {
                    out.push(GridPoint {
                        i_d1,
                        i_d2,
                        l_g,
                        r_g,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub i_d1: f64,
    pub i_d2: f64,
    pub l_g: f64,
    pub r_g: f64,
}

impl GridPoint {
    pub fn model(&self) -> Result<SystemModel> {
        SystemModel::two_inverters(self.r_g, self.l_g, self.i_d1, self.i_d2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SadDesign {
    pub omega_c: f64,
    pub h_v: f64,
    /// Margin re-assessed on the full system with this tuning.
    pub margin: f64,
    /// Critical frequency after tuning, Hz (`NaN` without crossings).
    pub f_cr: f64,
    /// Critical frequency of the undamped system the search started from.
    pub f_cr_undamped: f64,
    /// The undamped system already met the threshold.
    pub idle: bool,
}

#[derive(Clone, Debug)]
pub struct DesignOptions {
    /// Damper whose ω_c and H_v are searched; other fields stay fixed.
    pub template: SadParams,
    pub h_v_max: f64,
    pub h_v_tol: f64,
    pub omega_points: usize,
    /// Search span as multiples of the undamped 2π·f_cr.
    pub omega_span: (f64, f64),
    /// Lower clamp on the signed damping target of idle points.
    pub idle_h_floor: f64,
    pub analysis: AnalysisOptions,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            template: SadParams::default(),
            h_v_max: 5.0,
            h_v_tol: 0.01,
            omega_points: 25,
            omega_span: (0.5, 3.0),
            idle_h_floor: -0.3,
            analysis: AnalysisOptions::default(),
        }
    }
}

fn margin_of(c: Option<crate::stability::Critical>) -> (f64, f64) {
    c.map_or((f64::INFINITY, f64::NAN), |c| (c.margin, c.f_cr))
}

/// Smallest damping gain (with its filter centre) that lifts the margin of
/// `model` to `sigma_thd`. The damper is taken as connected, so the
/// undamped reference is the damper at `H_v = 0`.
pub fn design_sad(model: &SystemModel, sigma_thd: f64, opts: &DesignOptions) -> Result<SadDesign> {
    if !(opts.h_v_max > 0.0 && opts.h_v_tol > 0.0 && opts.omega_points >= 1 && opts.idle_h_floor <= 0.0) {
        return Err(Error::param("design", "bad search bounds"));
    }
    let base = model.clone().with_sad(None);
    let cache = BaseEigenCache::new(&base)?;
    let tmpl = opts.template;
    let eval = |omega_c: f64, h_v: f64| -> Result<(f64, f64)> {
        let sp = tmpl.with_tuning(omega_c, h_v);
        sp.validate()?;
        let c = cache.shifted_margin(|f| sad_admittance(&sp, f), &opts.analysis)?;
        Ok(margin_of(c))
    };
    let (m0, f0) = eval(tmpl.omega_c, 0.0)?;
    if m0 >= sigma_thd || !f0.is_finite() {
        let checked = recheck(&base, tmpl.with_tuning(tmpl.omega_c, 0.0), &opts.analysis)?;
        return Ok(SadDesign {
            omega_c: tmpl.omega_c,
            h_v: 0.0,
            margin: checked.0,
            f_cr: checked.1,
            f_cr_undamped: f0,
            idle: true,
        });
    }
    let w_cr = 2.0 * std::f64::consts::PI * f0;
    let n = opts.omega_points;
    let (lo_k, hi_k) = opts.omega_span;
    let mut omegas: Vec<f64> = (0..n)
        .map(|k| {
            let r = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
            w_cr * lo_k * (hi_k / lo_k).powf(r)
        })
        .collect();
    // visiting in order of distance to ω_cr makes the tie-break implicit
    omegas.sort_by(|a, b| (a - w_cr).abs().total_cmp(&(b - w_cr).abs()));

    let mut best_margin = m0;
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    let mut best_h = f64::INFINITY;
    for &w in &omegas {
        let top = best_h.min(opts.h_v_max);
        let (m_top, _) = eval(w, top)?;
        best_margin = best_margin.max(m_top);
        if m_top < sigma_thd {
            continue;
        }
        let (mut lo, mut hi) = (0.0, top);
        while hi - lo > opts.h_v_tol {
            let mid = 0.5 * (lo + hi);
            if eval(w, mid)?.0 >= sigma_thd {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        candidates.push((w, hi));
        if hi < best_h {
            best_h = hi;
        }
    }
    candidates.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then(((a.0 - w_cr).abs()).total_cmp(&(b.0 - w_cr).abs()))
    });
    for (w, h) in candidates {
        let (margin, f_cr) = recheck(&base, tmpl.with_tuning(w, h), &opts.analysis)?;
        if margin >= sigma_thd {
            return Ok(SadDesign {
                omega_c: w,
                h_v: h,
                margin,
                f_cr,
                f_cr_undamped: f0,
                idle: false,
            });
        }
        log::debug!("candidate ω_c={w:.2}, H_v={h:.3} failed the full re-check ({margin:.4})");
    }
    Err(Error::Infeasible { best_margin })
}

/// Full assessment with the damper attached; `-∞` unless the verdict is
/// stable.
fn recheck(base: &SystemModel, sp: SadParams, opts: &AnalysisOptions) -> Result<(f64, f64)> {
    let r = assess(&base.clone().with_sad(Some(sp)), opts)?;
    let f = r.critical.map_or(f64::NAN, |c| c.f_cr);
    if r.verdict == Verdict::Stable {
        Ok((r.margin, f))
    } else {
        Ok((f64::NEG_INFINITY, f))
    }
}

/// Damper-parameter dataset plus bookkeeping of the search.
#[derive(Clone, Debug)]
pub struct SadDataset {
    pub dataset: Dataset,
    pub designs: Vec<(GridPoint, SadDesign)>,
    pub infeasible: Vec<(GridPoint, f64)>,
}

pub const SAD_INPUTS: [&str; 3] = ["i_d1_A", "i_d2_A", "l_g_H"];
pub const SAD_TARGETS: [&str; 2] = ["omega_c_radps", "h_v"];

pub fn generate_sad_dataset(
    grid: &OperatingGrid,
    sigma_thd: f64,
    opts: &DesignOptions,
    seed: u64,
) -> Result<SadDataset> {
    grid.validate()?;
    let pts = grid.points();
    let results: Vec<(GridPoint, Result<SadDesign>)> = pts
        .par_iter()
        .map(|p| (*p, p.model().and_then(|m| design_sad(&m, sigma_thd, opts))))
        .collect();
    let mut designs = Vec::new();
    let mut infeasible = Vec::new();
    for (p, r) in results {
        match r {
            Ok(d) => designs.push((p, d)),
            Err(Error::Infeasible { best_margin }) => {
                log::warn!(
                    "no feasible design at I_d1={}, I_d2={}, L_g={} (best margin {best_margin:.4})",
                    p.i_d1,
                    p.i_d2,
                    p.l_g
                );
                infeasible.push((p, best_margin));
            }
            Err(e) => return Err(e),
        }
    }
    if infeasible.len() * 10 > pts.len() {
        return Err(Error::TooManyInfeasible {
            infeasible: infeasible.len(),
            total: pts.len(),
        });
    }
    let inputs = designs
        .iter()
        .map(|(p, _)| vec![p.i_d1, p.i_d2, p.l_g])
        .collect();
    let targets = training_targets(&designs, sigma_thd, opts)?;
    let dataset = Dataset::new(
        SAD_INPUTS.iter().map(|s| s.to_string()).collect(),
        SAD_TARGETS.iter().map(|s| s.to_string()).collect(),
        inputs,
        targets,
        seed,
    )?;
    Ok(SadDataset {
        dataset,
        designs,
        infeasible,
    })
}

/// Regression targets for the damper map.
///
/// Active designs are used as found. An idle point has no meaningful filter
/// centre, so its ω_c target is filled from a least-squares plane through the
/// active designs, and its H_v target is the signed gain at which the margin
/// would fall to `sigma_thd` (first-order, clamped at `idle_h_floor`). This
/// keeps both targets continuous across the boundary of the damped region;
/// predictions clamp negative gains to zero.
fn training_targets(
    designs: &[(GridPoint, SadDesign)],
    sigma_thd: f64,
    opts: &DesignOptions,
) -> Result<Vec<Vec<f64>>> {
    let features = |p: &GridPoint| [p.i_d1, p.i_d2, p.l_g * 1e3, 1.0];
    let active: Vec<_> = designs.iter().filter(|(_, d)| !d.idle).collect();
    let plane = if active.len() >= 4 {
        let a = DMatrix::from_fn(active.len(), 4, |i, j| features(&active[i].0)[j]);
        let b = DVector::from_fn(active.len(), |i, _| active[i].1.omega_c);
        a.svd(true, true).solve(&b, 1e-12).ok()
    } else {
        None
    };
    let probe = 0.05;
    designs
        .par_iter()
        .map(|(p, d)| {
            if !d.idle {
                return Ok(vec![d.omega_c, d.h_v]);
            }
            let w = match &plane {
                Some(c) => {
                    let x = features(p);
                    (0..4).map(|j| c[j] * x[j]).sum::<f64>().max(1.0)
                }
                None => d.omega_c,
            };
            let base = p.model()?.with_sad(None);
            let (m1, _) = recheck(&base, opts.template.with_tuning(w, probe), &opts.analysis)?;
            let slope = (m1 - d.margin) / probe;
            let h = if slope.is_finite() && slope > 0.0 && d.margin.is_finite() {
                (-(d.margin - sigma_thd) / slope).max(opts.idle_h_floor)
            } else {
                opts.idle_h_floor
            };
            Ok(vec![w, h.min(0.0)])
        })
        .collect()
}

pub const ADMITTANCE_INPUTS: [&str; 5] = ["f_hz", "v_d_V", "v_q_V", "i_od_A", "i_oq_A"];
pub const ADMITTANCE_TARGETS: [&str; 8] = [
    "re_ydd", "im_ydd", "re_ydq", "im_ydq", "re_yqd", "im_yqd", "re_yqq", "im_yqq",
];

/// Operating points for the admittance dataset (Cartesian product).
#[derive(Clone, Debug, PartialEq)]
pub struct AdmittanceRanges {
    pub v_d: Vec<f64>,
    pub i_d: Vec<f64>,
    pub i_q: Vec<f64>,
}

impl Default for AdmittanceRanges {
    fn default() -> Self {
        let v = crate::plants::nominal_grid_peak();
        Self {
            v_d: vec![0.95 * v, v, 1.05 * v],
            i_d: vec![10.0, 20.0, 30.0, 40.0, 50.0],
            i_q: vec![0.0],
        }
    }
}

#[derive(Clone, Debug)]
pub enum TargetSource {
    Analytic,
    /// Targets from time-domain perturbation scans.
    Measured(ScanOptions),
}

fn admittance_row(y: &DqMatrix) -> Vec<f64> {
    y.entries().iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Rows `(f, V_d, V_q, I_od, I_oq) → (Re, Im of Y_dd, Y_dq, Y_qd, Y_qq)`.
/// Operating points the scan refuses are skipped and counted.
pub fn generate_admittance_dataset(
    inverter: &GflParams,
    ranges: &AdmittanceRanges,
    freqs: &FrequencyGrid,
    source: &TargetSource,
    seed: u64,
) -> Result<(Dataset, usize)> {
    inverter.validate()?;
    if ranges.v_d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidOperatingPoint("V_d must be positive".into()));
    }
    let mut ops = Vec::new();
    for &v in &ranges.v_d {
        for &id in &ranges.i_d {
            for &iq in &ranges.i_q {
                ops.push((v, id, iq));
            }
        }
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut skipped = 0;
    for &(v, id, iq) in &ops {
        let ys: Vec<DqMatrix> = match source {
            TargetSource::Analytic => freqs
                .freqs()
                .iter()
                .map(|&f| gfl_admittance(inverter, v, id, iq, f))
                .collect::<Result<_>>()?,
            TargetSource::Measured(opts) => {
                let dut = DeviceUnderTest::Gfl {
                    params: *inverter,
                    i_d0: id,
                    i_q0: iq,
                };
                match scan_admittance(&dut, v, freqs, opts) {
                    Ok(y) => y,
                    Err(e @ (Error::ScanRefused(_) | Error::ScanNotSettled { .. })) => {
                        log::warn!("skipping operating point V_d={v}, I_d={id}, I_q={iq}: {e}");
                        skipped += freqs.len();
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        for (&f, y) in freqs.freqs().iter().zip(&ys) {
            inputs.push(vec![f, v, 0.0, id, iq]);
            targets.push(admittance_row(y));
        }
    }
    let ds = Dataset::new(
        ADMITTANCE_INPUTS.iter().map(|s| s.to_string()).collect(),
        ADMITTANCE_TARGETS.iter().map(|s| s.to_string()).collect(),
        inputs,
        targets,
        seed,
    )?;
    Ok((ds, skipped))
}

/// Training settings for the damper map: longer runs with more patience
/// than the defaults, several starts.
pub fn damper_hyper() -> Hyper {
    Hyper {
        max_epochs: 60_000,
        patience: 3_000,
        plateau: 1_500,
        ..Hyper::default()
    }
}

pub const DAMPER_STARTS: usize = 4;

/// Training settings for the admittance surrogate.
pub fn admittance_hyper() -> Hyper {
    Hyper {
        step: 0.05,
        max_epochs: 100_000,
        ..Hyper::default()
    }
}

/// Damper tuning predicted by the surrogate, with its extrapolation flag.
pub fn predict_sad(model: &MlpModel, i_d1: f64, i_d2: f64, l_g: f64) -> Result<(f64, f64, bool)> {
    let p = predict(model, &[i_d1, i_d2, l_g])?;
    Ok((p.values[0], p.values[1].max(0.0), p.extrapolated))
}

pub fn design_csv(designs: &[(GridPoint, SadDesign)]) -> String {
    let mut s = String::from("i_d1_A,i_d2_A,l_g_H,r_g_ohm,omega_c_radps,h_v,margin,f_cr_hz,idle\n");
    for (p, d) in designs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            p.i_d1, p.i_d2, p.l_g, p.r_g, d.omega_c, d.h_v, d.margin, d.f_cr, d.idle
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_the_125_point_grid() {
        let g = OperatingGrid::default();
        assert_eq!(g.points().len(), 125);
        assert!(g.z_g.iter().all(|(l, r)| (r / l - 50.0).abs() < 1e-9));
    }

    #[test]
    fn strong_grid_leaves_damper_idle() {
        let m = SystemModel::case_system(0.025, 0.5e-3, 1.0).unwrap();
        let d = design_sad(&m, 0.1, &DesignOptions::default()).unwrap();
        assert!(d.idle);
        assert_eq!(d.h_v, 0.0);
    }

    #[test]
    fn analytic_admittance_rows_match_model() {
        let inv = GflParams::case_inv1();
        let freqs = FrequencyGrid::log(1.0, 1000.0, 50).unwrap();
        let ranges = AdmittanceRanges {
            v_d: vec![310.0],
            i_d: vec![50.0],
            i_q: vec![0.0],
        };
        let (ds, skipped) =
            generate_admittance_dataset(&inv, &ranges, &freqs, &TargetSource::Analytic, 1).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(ds.len(), 50);
        for (x, y) in ds.inputs.iter().zip(&ds.targets) {
            let m = gfl_admittance(&inv, 310.0, 50.0, 0.0, x[0]).unwrap();
            assert_eq!(y, &admittance_row(&m));
        }
    }

    #[test]
    fn admittance_depends_on_current() {
        let inv = GflParams::case_inv1();
        let freqs = FrequencyGrid::new(vec![100.0]).unwrap();
        let ranges = AdmittanceRanges {
            v_d: vec![310.0],
            i_d: vec![10.0, 20.0, 30.0, 40.0, 50.0],
            i_q: vec![0.0],
        };
        let (ds, _) =
            generate_admittance_dataset(&inv, &ranges, &freqs, &TargetSource::Analytic, 1).unwrap();
        // the PLL branch carries I_d into the q-axis column
        let yqq: Vec<f64> = ds.targets.iter().map(|t| t[6]).collect();
        assert!(yqq.windows(2).all(|w| w[0] != w[1]), "{yqq:?}");
    }
}
