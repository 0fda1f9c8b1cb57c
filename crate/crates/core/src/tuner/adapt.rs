//! Self-adaptive damping loop on a running simulation.

use std::fmt::Write as _;

use super::{design_sad, predict_sad, DesignOptions};
use crate::ann::MlpModel;
use crate::plants::{GridParams, SadParams};
use crate::simtime::{
    detect_instability, Action, InstabilityVerdict, OracleVerdict, Scenario, Simulator, WaveRecord,
};
use crate::stability::{assess, AnalysisOptions, ShuntDevice, SystemModel, Verdict};
use crate::zest::{run_estimation, EstimationConfig, EstimationResult};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdaptConfig {
    pub sigma_thd: f64,
    pub estimation: EstimationConfig,
    /// Averaging interval of the monitored currents, s.
    pub monitor_period: f64,
    /// Change of any inverter's d-axis current that triggers a retune, A.
    pub retune_threshold: f64,
    /// Post-check margin required of a predicted tuning, as a fraction of
    /// `sigma_thd`.
    pub post_check_ratio: f64,
    pub design: DesignOptions,
    /// Window of the time-domain verdict on the closed-loop run, s.
    pub detect_window: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            sigma_thd: 0.1,
            estimation: EstimationConfig::default(),
            monitor_period: 0.05,
            retune_threshold: 2.0,
            post_check_ratio: 0.8,
            design: DesignOptions::default(),
            detect_window: 0.05,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_thd.is_finite() && self.sigma_thd > 0.0) {
            return Err(Error::param("sigma_thd", "must be positive"));
        }
        if !(self.monitor_period > 0.0 && self.retune_threshold > 0.0) {
            return Err(Error::param("monitor_period", "period and threshold must be positive"));
        }
        if !(self.post_check_ratio > 0.0 && self.post_check_ratio <= 1.0) {
            return Err(Error::param("post_check_ratio", "must lie in (0, 1]"));
        }
        self.estimation.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuningSource {
    Surrogate,
    /// Direct margin-constrained search, after the surrogate was rejected.
    Direct,
    /// Neither path produced a usable tuning; the previous one stays.
    Kept,
}

impl TuningSource {
    fn as_str(self) -> &'static str {
        match self {
            TuningSource::Surrogate => "surrogate",
            TuningSource::Direct => "direct",
            TuningSource::Kept => "kept",
        }
    }
}

/// One tuning decision with everything that fed it.
#[derive(Clone, Debug, PartialEq)]
pub struct TuningRecord {
    pub t: f64,
    /// PCC d-axis voltage in the first inverter's PLL frame, V.
    pub v_d: f64,
    /// Averaged d-axis current of each inverter, A.
    pub i_d: Vec<f64>,
    pub predicted: (f64, f64),
    pub extrapolated: bool,
    /// Margin of the predicted tuning on the estimated system (`-∞` when
    /// the verdict is not stable).
    pub predicted_margin: f64,
    pub applied: (f64, f64),
    pub applied_margin: f64,
    pub source: TuningSource,
    pub note: String,
}

#[derive(Clone, Debug)]
pub struct AdaptReport {
    pub estimation: Option<EstimationResult>,
    pub estimation_error: Option<String>,
    /// Grid used for every decision.
    pub grid: GridParams,
    pub steps: Vec<TuningRecord>,
    pub oracle: InstabilityVerdict,
    pub record: WaveRecord,
}

impl AdaptReport {
    /// Any decision fell back from the surrogate.
    pub fn flagged(&self) -> bool {
        self.estimation_error.is_some() || self.steps.iter().any(|s| s.source != TuningSource::Surrogate)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[estimation]");
        match (&self.estimation, &self.estimation_error) {
            (Some(e), _) => s.push_str(&e.to_text()),
            (None, Some(err)) => {
                let _ = writeln!(s, "error = {err}");
            }
            _ => {}
        }
        let _ = writeln!(s, "\n[grid_used]");
        let _ = writeln!(s, "r_g_ohm = {}", self.grid.r_g);
        let _ = writeln!(s, "l_g_h = {}", self.grid.l_g);
        let _ = writeln!(s, "\n[tuning]");
        let _ = writeln!(s, "decisions = {}", self.steps.len());
        let _ = writeln!(s, "flagged = {}", self.flagged());
        if let Some(last) = self.steps.last() {
            let _ = writeln!(s, "final_omega_c_radps = {}", last.applied.0);
            let _ = writeln!(s, "final_h_v = {}", last.applied.1);
            let _ = writeln!(s, "final_margin = {}", last.applied_margin);
        }
        let _ = writeln!(s, "\n[time_domain]");
        let _ = writeln!(s, "verdict = {:?}", self.oracle.verdict);
        let _ = writeln!(s, "growth_rate_per_s = {}", self.oracle.growth_rate);
        let _ = writeln!(s, "divergent = {}", self.record.divergent);
        s
    }

    pub fn steps_csv(&self) -> String {
        let n = self.steps.first().map_or(0, |s| s.i_d.len());
        let mut s = String::from("t_s,v_d_V");
        for k in 1..=n {
            let _ = write!(s, ",i_d{k}_A");
        }
        s.push_str(
            ",omega_c_pred,h_v_pred,extrapolated,margin_pred,omega_c_applied,h_v_applied,margin_applied,source,note\n",
        );
        for r in &self.steps {
            let _ = write!(s, "{},{}", r.t, r.v_d);
            for i in &r.i_d {
                let _ = write!(s, ",{i}");
            }
            let _ = writeln!(
                s,
                ",{},{},{},{},{},{},{},{},{}",
                r.predicted.0,
                r.predicted.1,
                r.extrapolated,
                r.predicted_margin,
                r.applied.0,
                r.applied.1,
                r.applied_margin,
                r.source.as_str(),
                r.note.replace(',', ";")
            );
        }
        s
    }
}

/// Linearization of the scenario's inverters at measured currents behind
/// the estimated grid.
fn decision_model(base: &SystemModel, grid: GridParams, i_d: &[f64]) -> Result<SystemModel> {
    let mut inverters = Vec::new();
    for (d, &id) in base.devices.iter().zip(i_d) {
        match d {
            ShuntDevice::Gfl { params, i_q0, .. } => inverters.push((*params, (id, *i_q0))),
            ShuntDevice::Fixed(_) => {
                return Err(Error::param("devices", "fixed admittances cannot be monitored"))
            }
        }
    }
    SystemModel::new(&inverters, grid, None)
}

fn checked_margin(model: &SystemModel, sp: SadParams, opts: &AnalysisOptions) -> Result<f64> {
    let r = assess(&model.clone().with_sad(Some(sp)), opts)?;
    Ok(if r.verdict == Verdict::Stable {
        r.margin
    } else {
        f64::NEG_INFINITY
    })
}

struct Decider<'a> {
    base: &'a SystemModel,
    grid: GridParams,
    surrogate: &'a MlpModel,
    cfg: &'a AdaptConfig,
    design: DesignOptions,
    estimation_failed: bool,
}

impl Decider<'_> {
    fn decide(&self, t: f64, v_d: f64, i_d: Vec<f64>, current: SadParams) -> Result<TuningRecord> {
        let model = decision_model(self.base, self.grid, &i_d)?;
        let (w, h, extrapolated) = predict_sad(self.surrogate, i_d[0], i_d[1], self.grid.l_g)?;
        let sp = current.with_tuning(w, h);
        let predicted_margin = match sp.validate() {
            Ok(()) => checked_margin(&model, sp, &self.cfg.design.analysis)?,
            Err(_) => f64::NEG_INFINITY,
        };
        let mut notes = Vec::new();
        if self.estimation_failed {
            notes.push("estimation failed".to_string());
        }
        if extrapolated {
            notes.push("surrogate extrapolating".to_string());
        }
        if predicted_margin < self.cfg.post_check_ratio * self.cfg.sigma_thd {
            notes.push(format!("post-check margin {predicted_margin:.4}"));
        }
        let mut rec = TuningRecord {
            t,
            v_d,
            i_d,
            predicted: (w, h),
            extrapolated,
            predicted_margin,
            applied: (w, h),
            applied_margin: predicted_margin,
            source: TuningSource::Surrogate,
            note: String::new(),
        };
        if notes.is_empty() {
            return Ok(rec);
        }
        let opts = DesignOptions {
            template: current,
            ..self.design.clone()
        };
        match design_sad(&model, self.cfg.sigma_thd, &opts) {
            Ok(d) => {
                rec.applied = (d.omega_c, d.h_v);
                rec.applied_margin = d.margin;
                rec.source = TuningSource::Direct;
            }
            Err(Error::Infeasible { best_margin }) => {
                notes.push(format!("direct design infeasible (best {best_margin:.4})"));
                rec.applied = (current.omega_c, current.h_v);
                rec.applied_margin = checked_margin(&model, current, &self.cfg.design.analysis)?;
                rec.source = TuningSource::Kept;
            }
            Err(e) => return Err(e),
        }
        rec.note = notes.join("; ");
        log::warn!("tuning at t = {t:.3} s fell back: {}", rec.note);
        Ok(rec)
    }
}

/// Running averages of the monitored quantities between two decisions.
#[derive(Default)]
struct Monitor {
    v_d: f64,
    i_d: Vec<f64>,
    n: usize,
}

fn rotate(x: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x.0 - s * x.1, s * x.0 + c * x.1)
}

impl Monitor {
    fn sample(&mut self, sim: &Simulator, inverters: usize) {
        if self.i_d.len() != inverters {
            self.i_d = vec![0.0; inverters];
        }
        for k in 0..inverters {
            let delta = sim.pll_state(k).map_or(0.0, |p| p.0);
            self.i_d[k] += rotate(sim.device_current(k), -delta).0;
        }
        let delta0 = sim.pll_state(0).map_or(0.0, |p| p.0);
        self.v_d += rotate(sim.pcc_voltage(), -delta0).0;
        self.n += 1;
    }

    fn take(&mut self) -> Option<(f64, Vec<f64>)> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let out = (self.v_d / n, self.i_d.iter().map(|x| x / n).collect());
        *self = Monitor::default();
        Some(out)
    }
}

/// Run `sc` with the damper retuned on line.
///
/// The grid is first estimated on the scenario's initial operating point
/// (a separate run without its events). The closed-loop run then averages
/// the inverter currents over each monitoring period and retunes the
/// damper whenever they have moved by more than the threshold since the
/// last decision; the first decision is made at the end of the first
/// period. The scenario's damper parameters are the starting tuning.
pub fn adapt(sc: &Scenario, surrogate: &MlpModel, cfg: &AdaptConfig, seed: u64) -> Result<AdaptReport> {
    cfg.validate()?;
    sc.validate()?;
    let initial = sc
        .model
        .sad
        .ok_or_else(|| Error::param("sad", "the scenario has no damper to tune"))?;
    let inverters = sc.model.devices.len();
    if inverters != 2 || surrogate.n_in != 3 || surrogate.n_out != 2 {
        return Err(Error::param(
            "surrogate",
            "the damper map takes two inverter currents and L_g and returns (ω_c, H_v)",
        ));
    }

    let probe = Scenario {
        events: Vec::new(),
        ..sc.clone()
    };
    let est_cfg = EstimationConfig {
        seed,
        ..cfg.estimation.clone()
    };
    let (estimation, estimation_error, grid) = match run_estimation(&probe, &est_cfg) {
        Ok(e) => {
            let g = GridParams::new(e.r_g, e.l_g);
            match g {
                Ok(g) => (Some(e), None, g),
                Err(err) => (Some(e), Some(err.to_string()), sc.model.grid),
            }
        }
        Err(e) => {
            log::warn!("grid estimation failed: {e}; using the configured grid");
            (None, Some(e.to_string()), sc.model.grid)
        }
    };
    let decider = Decider {
        base: &sc.model,
        grid,
        surrogate,
        cfg,
        design: cfg.design.clone(),
        estimation_failed: estimation_error.is_some(),
    };

    let mut sim = Simulator::from_scenario(sc, seed)?;
    let sad = sim.sad_index().expect("scenario has a damper");
    let mut current = initial;
    let mut steps: Vec<TuningRecord> = Vec::new();
    let mut monitor = Monitor::default();
    let every = ((5e-5 / sim.h()).round() as u64).max(1);
    let mut events = sc.events.iter().peekable();
    let mut tick = cfg.monitor_period;
    let mut alive = true;
    while alive && sim.time() < sc.duration - 0.5 * sim.h() {
        let next_event = events.peek().map_or(f64::INFINITY, |e| e.t);
        let target = tick.min(next_event).min(sc.duration);
        let mut count = 0u64;
        alive = sim.run_with(target, |s| {
            count += 1;
            if count % every == 0 {
                monitor.sample(s, inverters);
            }
        });
        if !alive {
            break;
        }
        while let Some(e) = events.next_if(|e| e.t <= sim.time() + 0.5 * sim.h()) {
            sim.apply(e.action)?;
        }
        if sim.time() + 0.5 * sim.h() >= tick {
            tick += cfg.monitor_period;
            if let Some((v_d, i_d)) = monitor.take() {
                let moved = steps.last().map_or(true, |last| {
                    last.i_d
                        .iter()
                        .zip(&i_d)
                        .any(|(a, b)| (a - b).abs() > cfg.retune_threshold)
                });
                if moved {
                    let rec = decider.decide(sim.time(), v_d, i_d, current)?;
                    if rec.source != TuningSource::Kept {
                        current = current.with_tuning(rec.applied.0, rec.applied.1);
                        sim.apply(Action::SetSadTuning {
                            device: sad,
                            omega_c: rec.applied.0,
                            h_v: rec.applied.1,
                        })?;
                    }
                    steps.push(rec);
                }
            }
        }
    }
    let record = sim.finish();
    let oracle = if record.divergent {
        InstabilityVerdict {
            verdict: OracleVerdict::Unstable,
            growth_rate: f64::INFINITY,
            settled: false,
        }
    } else {
        detect_instability(&record, cfg.detect_window)?
    };
    Ok(AdaptReport {
        estimation,
        estimation_error,
        grid,
        steps,
        oracle,
        record,
    })
}
