//! PCC nodal admittance, eigenvalue trajectories, real-axis crossings,
//! winding-number verdicts and the damper superposition check.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Mutex;
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dqcore::{track_branches, winding_number, DqMatrix, EigenTrajectory, FrequencyGrid};
use crate::plants::{
    gfl_admittance, grid_impedance, sad_admittance, steady_pcc_voltage, GflParams, GridParams,
    OperatingPoint, SadParams,
};
use crate::{Error, Result};

/// A shunt element at the PCC.
#[derive(Clone, Debug, PartialEq)]
pub enum ShuntDevice {
    Gfl {
        params: GflParams,
        i_d0: f64,
        i_q0: f64,
    },
    /// Frequency-independent admittance, mainly a test hook.
    Fixed(DqMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    pub devices: Vec<ShuntDevice>,
    pub grid: GridParams,
    pub sad: Option<SadParams>,
    pub v_d0: f64,
}

impl SystemModel {
    /// GFL inverters at their operating currents, with the PCC voltage
    /// solved from the stiff source behind the grid branch.
    pub fn new(
        inverters: &[(GflParams, (f64, f64))],
        grid: GridParams,
        sad: Option<SadParams>,
    ) -> Result<Self> {
        grid.validate()?;
        let total = inverters
            .iter()
            .fold((0.0, 0.0), |acc, (_, i)| (acc.0 + i.0, acc.1 + i.1));
        let v_d0 = steady_pcc_voltage(&grid, total)?;
        let model = Self {
            devices: inverters
                .iter()
                .map(|(p, i)| ShuntDevice::Gfl {
                    params: *p,
                    i_d0: i.0,
                    i_q0: i.1,
                })
                .collect(),
            grid,
            sad,
            v_d0,
        };
        model.validate()?;
        Ok(model)
    }

    /// The two-inverter case system with both d-axis currents scaled by
    /// `power` (1.0 = rated 50 A / 60 A).
    pub fn case_system(r_g: f64, l_g: f64, power: f64) -> Result<Self> {
        Self::two_inverters(r_g, l_g, 50.0 * power, 60.0 * power)
    }

    pub fn two_inverters(r_g: f64, l_g: f64, i_d1: f64, i_d2: f64) -> Result<Self> {
        Self::new(
            &[
                (GflParams::case_inv1(), (i_d1, 0.0)),
                (GflParams::case_inv2(), (i_d2, 0.0)),
            ],
            GridParams::new(r_g, l_g)?,
            None,
        )
    }

    pub fn with_sad(mut self, sad: Option<SadParams>) -> Self {
        self.sad = sad;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::param("devices", "at least one inverter required"));
        }
        self.grid.validate()?;
        if !(self.v_d0 > 0.0) {
            return Err(Error::InvalidOperatingPoint("V_d0 must be positive".into()));
        }
        for d in &self.devices {
            match d {
                ShuntDevice::Gfl { params, .. } => params.validate()?,
                ShuntDevice::Fixed(m) if !m.is_finite() => {
                    return Err(Error::param("devices", "fixed admittance not finite"))
                }
                ShuntDevice::Fixed(_) => {}
            }
        }
        if let Some(sp) = &self.sad {
            sp.validate()?;
        }
        Ok(())
    }

    pub fn operating_point(&self) -> OperatingPoint {
        OperatingPoint {
            v_d0: self.v_d0,
            currents: self
                .devices
                .iter()
                .filter_map(|d| match d {
                    ShuntDevice::Gfl { i_d0, i_q0, .. } => Some((*i_d0, *i_q0)),
                    ShuntDevice::Fixed(_) => None,
                })
                .collect(),
            r_g: self.grid.r_g,
            l_g: self.grid.l_g,
        }
    }

    /// `Σ Y_eq,i(f)`.
    pub fn device_admittance(&self, f_hz: f64) -> Result<DqMatrix> {
        let mut y = DqMatrix::zero();
        for d in &self.devices {
            y = y + match d {
                ShuntDevice::Gfl { params, i_d0, i_q0 } => {
                    gfl_admittance(params, self.v_d0, *i_d0, *i_q0, f_hz)?
                }
                ShuntDevice::Fixed(m) => *m,
            };
        }
        Ok(y)
    }

    /// `Y_PCC` without the damper.
    pub fn base_admittance(&self, f_hz: f64) -> Result<DqMatrix> {
        let zg_inv = grid_impedance(&self.grid, f_hz)
            .inverse()
            .ok_or_else(|| Error::Degenerate(format!("Z_g singular at {f_hz} Hz")))?;
        Ok(self.device_admittance(f_hz)? + zg_inv)
    }

    /// Damper admittance (zero when absent).
    pub fn sad_admittance(&self, f_hz: f64) -> Result<Complex64> {
        match &self.sad {
            Some(sp) => sad_admittance(sp, f_hz),
            None => Ok(Complex64::new(0.0, 0.0)),
        }
    }

    pub fn ypcc(&self, f_hz: f64) -> Result<DqMatrix> {
        Ok(self.base_admittance(f_hz)? + DqMatrix::scalar(self.sad_admittance(f_hz)?))
    }

    /// Return ratio `L_m = Σ Y_eq,i · Z_g`.
    pub fn return_ratio(&self, f_hz: f64) -> Result<DqMatrix> {
        Ok(self.device_admittance(f_hz)? * grid_impedance(&self.grid, f_hz))
    }
}

/// `Y_PCC(f)` and `L_m(f)` on every grid point.
pub fn assemble_ypcc(
    model: &SystemModel,
    grid: &FrequencyGrid,
) -> Result<Vec<(DqMatrix, DqMatrix)>> {
    model.validate()?;
    grid.freqs()
        .par_iter()
        .map(|&f| Ok((model.ypcc(f)?, model.return_ratio(f)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisOptions {
    pub grid: FrequencyGrid,
    pub marginal_band: f64,
    /// Bisection passes allowed for local refinement.
    pub max_refine_passes: usize,
    /// Crossings are bracketed until `Δf/f` falls below this.
    pub crossing_rel_tol: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            grid: FrequencyGrid::default_analysis(),
            marginal_band: 0.02,
            max_refine_passes: 40,
            crossing_rel_tol: 1e-5,
        }
    }
}

impl AnalysisOptions {
    pub fn with_grid(mut self, grid: FrequencyGrid) -> Self {
        self.grid = grid;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Stable,
    Unstable,
    Marginal,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
            Verdict::Marginal => "marginal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossing {
    pub f_hz: f64,
    pub re: f64,
}

/// Crossing with the smallest real part over all branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Critical {
    pub branch: usize,
    pub f_cr: f64,
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub trajectories: [EigenTrajectory; 2],
    pub crossings: [Vec<Crossing>; 2],
    pub critical: Option<Critical>,
    /// Winding numbers around the origin; identical when the branches form
    /// one joint contour.
    pub windings: [i64; 2],
    pub joint_contour: bool,
    pub verdict: Verdict,
    /// Crossing margin; `+∞` when no branch crosses the real axis.
    pub margin: f64,
    /// Winding verdict and margin sign disagree.
    pub conditionally_stable: bool,
    /// Worst relative deviation of `eig(Y + Y_ad·I) − (eig(Y) + Y_ad)`.
    pub shift_residual: Option<f64>,
    pub return_ratio: Vec<DqMatrix>,
}

impl StabilityReport {
    pub fn freqs(&self) -> &[f64] {
        &self.trajectories[0].freqs
    }

    /// Structured text with fixed keys.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "verdict = {}", self.verdict);
        let _ = writeln!(s, "margin = {}", fmt_f(self.margin));
        match self.critical {
            Some(c) => {
                let _ = writeln!(s, "f_cr = {}", c.f_cr);
                let _ = writeln!(s, "branch = {}", c.branch);
            }
            None => {
                let _ = writeln!(s, "f_cr = none");
                let _ = writeln!(s, "branch = none");
            }
        }
        let _ = writeln!(s, "winding_l1 = {}", self.windings[0]);
        let _ = writeln!(s, "winding_l2 = {}", self.windings[1]);
        let _ = writeln!(s, "joint_contour = {}", self.joint_contour);
        let _ = writeln!(s, "conditionally_stable = {}", self.conditionally_stable);
        for (b, list) in self.crossings.iter().enumerate() {
            for c in list {
                let _ = writeln!(s, "crossing_l{} = {} {}", b + 1, c.f_hz, c.re);
            }
        }
        if let Some(r) = self.shift_residual {
            let _ = writeln!(s, "shift_residual = {r:e}");
        }
        let _ = writeln!(s, "points = {}", self.freqs().len());
        s
    }

    /// `f_hz,re_l1,im_l1,re_l2,im_l2`.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("f_hz,re_l1,im_l1,re_l2,im_l2\n");
        let [a, b] = &self.trajectories;
        for k in 0..a.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                a.freqs[k], a.values[k].re, a.values[k].im, b.values[k].re, b.values[k].im
            );
        }
        s
    }
}

fn fmt_f(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x}")
    }
}

/// Parse the trajectory CSV back into `(f, λ₁, λ₂)` rows.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<(f64, Complex64, Complex64)>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 {
            if line.trim() != "f_hz,re_l1,im_l1,re_l2,im_l2" {
                return Err(Error::Parse {
                    line: 1,
                    msg: "unexpected trajectory header".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        if v.len() != 5 {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected 5 fields, got {}", v.len()),
            });
        }
        rows.push((v[0], Complex64::new(v[1], v[2]), Complex64::new(v[3], v[4])));
    }
    Ok(rows)
}

/// Every sign change of `Im λ`, located by linear interpolation.
pub fn find_crossings(traj: &EigenTrajectory) -> Vec<Crossing> {
    let mut out = Vec::new();
    for k in 0..traj.values.len().saturating_sub(1) {
        let (a, b) = (traj.values[k], traj.values[k + 1]);
        if (a.im < 0.0) != (b.im < 0.0) {
            let t = a.im / (a.im - b.im);
            out.push(Crossing {
                f_hz: traj.freqs[k] + t * (traj.freqs[k + 1] - traj.freqs[k]),
                re: a.re + t * (b.re - a.re),
            });
        }
    }
    out
}

type Pair = (Complex64, Complex64);

#[derive(Clone, Copy, PartialEq, Eq)]
enum Refine {
    Crossings,
    Contour,
}

const ARG_STEP_MAX: f64 = PI / 8.0;
const MAX_POINTS: usize = 200_000;

/// Sample both eigenvalue branches of `eval`, refining locally until the
/// crossings (and, for contours, argument steps) are resolved.
fn sample_branches<F>(
    eval: &F,
    opts: &AnalysisOptions,
    mode: Refine,
) -> Result<(EigenTrajectory, EigenTrajectory)>
where
    F: Fn(f64) -> Result<Pair> + Sync,
{
    let mut freqs = opts.grid.freqs().to_vec();
    let mut pairs: Vec<Pair> = freqs.par_iter().map(|&f| eval(f)).collect::<Result<_>>()?;
    for _ in 0..opts.max_refine_passes {
        let (t1, t2) = track_branches(&freqs, &pairs)?;
        let mut split = vec![false; freqs.len() - 1];
        for t in [&t1, &t2] {
            let mut closest = 0;
            for k in 0..freqs.len() - 1 {
                let (a, b) = (t.values[k], t.values[k + 1]);
                let rel = (freqs[k + 1] - freqs[k]) / freqs[k];
                if (a.im < 0.0) != (b.im < 0.0) && rel > opts.crossing_rel_tol {
                    split[k] = true;
                }
                if mode == Refine::Contour && rel > 1e-9 && a.norm() > 0.0 {
                    if (b / a).arg().abs() > ARG_STEP_MAX {
                        split[k] = true;
                    }
                }
                if t.values[k].norm() < t.values[closest].norm() {
                    closest = k;
                }
            }
            if mode == Refine::Contour {
                for k in [closest.saturating_sub(1), closest] {
                    if k + 1 < freqs.len() && (freqs[k + 1] - freqs[k]) / freqs[k] > 1e-4 {
                        split[k] = true;
                    }
                }
            }
        }
        let new_f: Vec<f64> = split
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(k, _)| (freqs[k] * freqs[k + 1]).sqrt())
            .collect();
        if new_f.is_empty() || freqs.len() + new_f.len() > MAX_POINTS {
            return Ok((t1, t2));
        }
        let new_p: Vec<Pair> = new_f.par_iter().map(|&f| eval(f)).collect::<Result<_>>()?;
        let mut merged: Vec<(f64, Pair)> = freqs
            .iter()
            .copied()
            .zip(pairs.iter().copied())
            .chain(new_f.into_iter().zip(new_p))
            .collect();
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        merged.dedup_by(|a, b| a.0 == b.0);
        freqs = merged.iter().map(|m| m.0).collect();
        pairs = merged.iter().map(|m| m.1).collect();
    }
    track_branches(&freqs, &pairs)
}

fn critical_of(crossings: &[Vec<Crossing>; 2]) -> Option<Critical> {
    let mut best: Option<Critical> = None;
    for (b, list) in crossings.iter().enumerate() {
        for c in list {
            if best.map_or(true, |x| c.re < x.margin) {
                best = Some(Critical {
                    branch: b + 1,
                    f_cr: c.f_hz,
                    margin: c.re,
                });
            }
        }
    }
    best
}

/// Closing arc from `z` to `conj(z)` through the positive real axis.
fn closing_arc(z: Complex64) -> Vec<Complex64> {
    let (r, a) = (z.norm(), z.arg());
    let n = ((2.0 * a.abs()) / (PI / 16.0)).ceil().max(4.0) as usize;
    (1..n)
        .map(|k| Complex64::from_polar(r, a - 2.0 * a * k as f64 / n as f64))
        .collect()
}

fn half_contour(values: &[Complex64]) -> Vec<Complex64> {
    let mut c = values.to_vec();
    c.extend(closing_arc(*values.last().expect("nonempty")));
    c.extend(values.iter().rev().map(|v| v.conj()));
    c
}

/// Whether the two branches start as a conjugate pair, in which case each
/// mirrored branch is not closed on its own and one joint contour is used.
fn is_conjugate_pair(l1: Complex64, l2: Complex64) -> bool {
    (l1 - l2.conj()).norm() < (l1 - l1.conj()).norm()
}

fn windings(t1: &EigenTrajectory, t2: &EigenTrajectory) -> Result<([i64; 2], bool)> {
    let origin = Complex64::new(0.0, 0.0);
    if is_conjugate_pair(t1.values[0], t2.values[0]) {
        let mut c = half_contour(&t1.values);
        c.extend(half_contour(&t2.values));
        let w = winding_number(&c, origin)?;
        Ok(([w, w], true))
    } else {
        let w1 = winding_number(&half_contour(&t1.values), origin)?;
        let w2 = winding_number(&half_contour(&t2.values), origin)?;
        Ok(([w1, w2], false))
    }
}

fn ypcc_pair(model: &SystemModel, f: f64) -> Result<Pair> {
    Ok(model.ypcc(f)?.eig2())
}

/// Full stability assessment.
pub fn assess(model: &SystemModel, opts: &AnalysisOptions) -> Result<StabilityReport> {
    model.validate()?;
    let eval = |f: f64| ypcc_pair(model, f);
    let (t1, t2) = sample_branches(&eval, opts, Refine::Contour)?;
    let crossings = [find_crossings(&t1), find_crossings(&t2)];
    let critical = critical_of(&crossings);
    let margin = critical.map_or(f64::INFINITY, |c| c.margin);
    let (w, joint) = windings(&t1, &t2)?;
    let encircles = w.iter().any(|&x| x != 0);
    let verdict = if margin.abs() < opts.marginal_band {
        Verdict::Marginal
    } else if encircles {
        Verdict::Unstable
    } else {
        Verdict::Stable
    };
    let conditionally_stable = (encircles && margin >= 0.0) || (!encircles && margin < 0.0);
    if conditionally_stable {
        log::warn!(
            "winding numbers {:?} disagree with crossing margin {:.4}; possibly conditionally stable",
            w,
            margin
        );
    }
    let freqs = t1.freqs.clone();
    let shift_residual = match model.sad {
        Some(_) => Some(shift_identity_residual(model, &freqs)?),
        None => None,
    };
    let return_ratio = freqs
        .par_iter()
        .map(|&f| model.return_ratio(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(StabilityReport {
        trajectories: [t1, t2],
        crossings,
        critical,
        windings: w,
        joint_contour: joint,
        verdict,
        margin,
        conditionally_stable,
        shift_residual,
        return_ratio,
    })
}

/// Crossing data only (no contour refinement or winding numbers).
pub fn critical_margin(model: &SystemModel, opts: &AnalysisOptions) -> Result<Option<Critical>> {
    model.validate()?;
    let eval = |f: f64| ypcc_pair(model, f);
    let (t1, t2) = sample_branches(&eval, opts, Refine::Crossings)?;
    Ok(critical_of(&[find_crossings(&t1), find_crossings(&t2)]))
}

/// Margin of the base system shifted by a scalar admittance, evaluated from
/// the base eigenvalues without rebuilding `Y_PCC`.
pub fn shifted_margin<G>(
    model: &SystemModel,
    shift: G,
    opts: &AnalysisOptions,
) -> Result<Option<Critical>>
where
    G: Fn(f64) -> Result<Complex64> + Sync,
{
    let eval = |f: f64| {
        let (a, b) = model.base_admittance(f)?.eig2();
        let y = shift(f)?;
        Ok((a + y, b + y))
    };
    let (t1, t2) = sample_branches(&eval, opts, Refine::Crossings)?;
    Ok(critical_of(&[find_crossings(&t1), find_crossings(&t2)]))
}

/// Base-system eigenvalues memoized by frequency, for repeated margin
/// evaluations of the same system under different scalar shifts.
pub struct BaseEigenCache<'a> {
    model: &'a SystemModel,
    memo: Mutex<HashMap<u64, (Complex64, Complex64)>>,
}

impl<'a> BaseEigenCache<'a> {
    pub fn new(model: &'a SystemModel) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            model,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn eig(&self, f: f64) -> Result<(Complex64, Complex64)> {
        let key = f.to_bits();
        if let Some(v) = self.memo.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let v = self.model.base_admittance(f)?.eig2();
        self.memo.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }

    /// Same result as [`shifted_margin`] on the cached model.
    pub fn shifted_margin<G>(&self, shift: G, opts: &AnalysisOptions) -> Result<Option<Critical>>
    where
        G: Fn(f64) -> Result<Complex64> + Sync,
    {
        let eval = |f: f64| {
            let (a, b) = self.eig(f)?;
            let y = shift(f)?;
            Ok((a + y, b + y))
        };
        let (t1, t2) = sample_branches(&eval, opts, Refine::Crossings)?;
        Ok(critical_of(&[find_crossings(&t1), find_crossings(&t2)]))
    }
}

/// Worst relative mismatch of `eig(Y + y·I) = eig(Y) + y` over `freqs`.
pub fn shift_identity_residual(model: &SystemModel, freqs: &[f64]) -> Result<f64> {
    let worst = freqs
        .par_iter()
        .map(|&f| {
            let base = model.base_admittance(f)?;
            let y = model.sad_admittance(f)?;
            let (a, b) = base.eig2();
            let (sa, sb) = (base + DqMatrix::scalar(y)).eig2();
            let keep = (sa - (a + y)).norm().max((sb - (b + y)).norm());
            let swap = (sb - (a + y)).norm().max((sa - (b + y)).norm());
            let scale = 1.0 + a.norm().max(b.norm()) + y.norm();
            Ok(keep.min(swap) / scale)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Output power fraction of both case inverters.
    Power,
    /// Grid inductance in H, with `R_g = 50·L_g`.
    Impedance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: f64,
    pub critical: Option<Critical>,
}

/// Critical eigenvalue along a parameter axis, in axis order.
pub fn margin_sweep<B>(build: B, values: &[f64], opts: &AnalysisOptions) -> Result<Vec<SweepRow>>
where
    B: Fn(f64) -> Result<SystemModel> + Sync,
{
    values
        .par_iter()
        .map(|&v| {
            let model = build(v)?;
            Ok(SweepRow {
                axis: v,
                critical: critical_margin(&model, opts)?,
            })
        })
        .collect()
}

/// Case-system sweep along one of the two standard axes.
pub fn case_sweep(
    axis: SweepAxis,
    values: &[f64],
    fixed_power: f64,
    fixed_lg: f64,
    sad: Option<SadParams>,
    opts: &AnalysisOptions,
) -> Result<Vec<SweepRow>> {
    margin_sweep(
        |v| {
            let (p, lg) = match axis {
                SweepAxis::Power => (v, fixed_lg),
                SweepAxis::Impedance => (fixed_power, v),
            };
            Ok(SystemModel::case_system(50.0 * lg, lg, p)?.with_sad(sad))
        },
        values,
        opts,
    )
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,f_cr_hz,margin,branch\n");
    for r in rows {
        match r.critical {
            Some(c) => {
                let _ = writeln!(s, "{},{},{},{}", r.axis, c.f_cr, c.margin, c.branch);
            }
            None => {
                let _ = writeln!(s, "{},,inf,", r.axis);
            }
        }
    }
    s
}
