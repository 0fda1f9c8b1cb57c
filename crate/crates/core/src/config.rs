//! Project configuration in TOML.
//!
//! Every section is a table of `key = value` entries in SI units. Unknown
//! keys are rejected. Only `[system.grid]` is mandatory; everything else
//! falls back to the two-inverter case system and the library defaults.
//!
//! ```toml
//! [system.grid]
//! r_g = 0.2          # Ω
//! l_g = 4e-3         # H
//!
//! [[system.inverters]]
//! v_dc = 800.0
//! l = 3e-3
//! r_l = 0.015
//! k_pi = 18.0
//! k_ii = 300.0
//! k_ppll = 5.0
//! k_ipll = 100.0
//! f_s = 10000.0
//! i_dref = 50.0
//!
//! [analysis]
//! sigma_thd = 0.1
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ann::{Hyper, DEFAULT_SPLIT};
use crate::dqcore::FrequencyGrid;
use crate::plants::{GflParams, GridParams, SadParams};
use crate::simtime::SimConfig;
use crate::stability::{AnalysisOptions, SystemModel};
use crate::zest::EstimationConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Grid-following inverters; `i_dref`/`i_qref` are their operating
    /// currents.
    #[serde(default = "case_inverters")]
    pub inverters: Vec<GflParams>,
    pub grid: GridParams,
    /// Damper at the PCC; absent means none is connected.
    #[serde(default)]
    pub sad: Option<SadParams>,
}

fn case_inverters() -> Vec<GflParams> {
    vec![GflParams::case_inv1(), GflParams::case_inv2()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub freq_min_hz: f64,
    pub freq_max_hz: f64,
    pub freq_points: usize,
    pub marginal_band: f64,
    pub sigma_thd: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            freq_min_hz: 0.1,
            freq_max_hz: 5000.0,
            freq_points: 2000,
            marginal_band: 0.02,
            sigma_thd: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub step_s: f64,
    pub duration_s: f64,
    pub record_rate_hz: f64,
    pub noise_v: f64,
    pub noise_i: f64,
    pub seed: u64,
    /// Reactive current step of the estimation protocol, A.
    pub delta_iqref_a: f64,
    pub t1_s: f64,
    pub t2_s: f64,
    pub lpf_cutoff_hz: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let sim = SimConfig::default();
        let est = EstimationConfig::default();
        Self {
            step_s: sim.h,
            duration_s: 2.0,
            record_rate_hz: sim.record_rate_hz,
            noise_v: sim.noise_v,
            noise_i: sim.noise_i,
            seed: 1,
            delta_iqref_a: est.delta_iqref,
            t1_s: est.t1,
            t2_s: est.t2,
            lpf_cutoff_hz: est.lpf_cutoff_hz,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub hidden: usize,
    pub step: f64,
    pub momentum: f64,
    pub patience: usize,
    pub plateau: usize,
    pub max_epochs: usize,
    pub max_restarts: usize,
    /// Independent initializations; the best on validation is kept.
    pub starts: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let h = Hyper::default();
        Self {
            hidden: h.hidden,
            step: h.step,
            momentum: h.momentum,
            patience: h.patience,
            plateau: h.plateau,
            max_epochs: h.max_epochs,
            max_restarts: h.max_restarts,
            starts: 1,
            train_fraction: DEFAULT_SPLIT.0,
            val_fraction: DEFAULT_SPLIT.1,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    pub sad_model: PathBuf,
    pub admittance_model: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            sad_model: PathBuf::from("sad_model.txt"),
            admittance_model: PathBuf::from("admittance_model.txt"),
        }
    }
}

impl ProjectConfig {
    /// The undamped two-inverter case system behind `(r_g, l_g)`.
    pub fn case(r_g: f64, l_g: f64) -> Result<Self> {
        Ok(Self {
            system: SystemSection {
                inverters: case_inverters(),
                grid: GridParams::new(r_g, l_g)?,
                sad: None,
            },
            analysis: AnalysisSection::default(),
            simulation: SimulationSection::default(),
            training: TrainingSection::default(),
            paths: PathsSection::default(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if s.inverters.is_empty() {
            return Err(Error::Config("system.inverters: at least one inverter required".into()));
        }
        for (k, inv) in s.inverters.iter().enumerate() {
            inv.validate()
                .map_err(|e| Error::Config(format!("system.inverters[{k}]: {e}")))?;
        }
        s.grid
            .validate()
            .map_err(|e| Error::Config(format!("system.grid: {e}")))?;
        if let Some(sp) = &s.sad {
            sp.validate()
                .map_err(|e| Error::Config(format!("system.sad: {e}")))?;
        }
        let a = &self.analysis;
        if !(a.freq_min_hz > 0.0 && a.freq_max_hz > a.freq_min_hz && a.freq_points >= 2) {
            return Err(Error::Config(
                "analysis: need 0 < freq_min_hz < freq_max_hz and freq_points ≥ 2".into(),
            ));
        }
        if !(a.marginal_band >= 0.0 && a.sigma_thd > 0.0) {
            return Err(Error::Config(
                "analysis: marginal_band must be ≥ 0 and sigma_thd > 0".into(),
            ));
        }
        let m = &self.simulation;
        if !(m.step_s > 0.0 && m.duration_s > 0.0 && m.record_rate_hz > 0.0) {
            return Err(Error::Config(
                "simulation: step_s, duration_s and record_rate_hz must be positive".into(),
            ));
        }
        if !(m.noise_v >= 0.0 && m.noise_i >= 0.0) {
            return Err(Error::Config("simulation: noise levels must be ≥ 0".into()));
        }
        self.estimation()
            .validate()
            .map_err(|e| Error::Config(format!("simulation: {e}")))?;
        let t = &self.training;
        if t.hidden == 0 || !(t.step > 0.0) || !(0.0..1.0).contains(&t.momentum) || t.starts == 0 {
            return Err(Error::Config(
                "training: need hidden ≥ 1, step > 0, 0 ≤ momentum < 1, starts ≥ 1".into(),
            ));
        }
        if !(t.train_fraction > 0.0 && t.val_fraction >= 0.0 && t.train_fraction + t.val_fraction <= 1.0) {
            return Err(Error::Config(
                "training: need train_fraction > 0, val_fraction ≥ 0, sum ≤ 1".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<FrequencyGrid> {
        let a = &self.analysis;
        FrequencyGrid::log(a.freq_min_hz, a.freq_max_hz, a.freq_points)
    }

    pub fn analysis_options(&self) -> Result<AnalysisOptions> {
        Ok(AnalysisOptions {
            marginal_band: self.analysis.marginal_band,
            ..AnalysisOptions::default().with_grid(self.grid()?)
        })
    }

    /// Linearized system at the configured operating currents.
    pub fn system_model(&self) -> Result<SystemModel> {
        let inv: Vec<(GflParams, (f64, f64))> = self
            .system
            .inverters
            .iter()
            .map(|p| (*p, (p.i_dref, p.i_qref)))
            .collect();
        SystemModel::new(&inv, self.system.grid, self.system.sad)
    }

    pub fn sim_config(&self) -> SimConfig {
        let m = &self.simulation;
        SimConfig {
            h: m.step_s,
            record_rate_hz: m.record_rate_hz,
            noise_v: m.noise_v,
            noise_i: m.noise_i,
            ..SimConfig::default()
        }
    }

    pub fn estimation(&self) -> EstimationConfig {
        let m = &self.simulation;
        EstimationConfig {
            delta_iqref: m.delta_iqref_a,
            t1: m.t1_s,
            t2: m.t2_s,
            lpf_cutoff_hz: m.lpf_cutoff_hz,
            seed: m.seed,
            ..EstimationConfig::default()
        }
    }

    pub fn hyper(&self) -> Hyper {
        let t = &self.training;
        Hyper {
            hidden: t.hidden,
            step: t.step,
            momentum: t.momentum,
            patience: t.patience,
            plateau: t.plateau,
            max_epochs: t.max_epochs,
            max_restarts: t.max_restarts,
        }
    }

    /// `p` resolved against the output directory unless absolute.
    pub fn out_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.paths.out_dir.join(p)
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.chars().all(|c| c == '|' || c == '^' || c == ' '))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_falls_back_to_case_system() {
        let cfg = ProjectConfig::parse("[system.grid]\nr_g = 0.2\nl_g = 4e-3\n").unwrap();
        assert_eq!(cfg.system.inverters.len(), 2);
        assert_eq!(cfg.system.inverters[1], GflParams::case_inv2());
        assert!(cfg.system.sad.is_none());
        assert_eq!(cfg.analysis.sigma_thd, 0.1);
        let m = cfg.system_model().unwrap();
        assert_eq!(m.operating_point().currents, vec![(50.0, 0.0), (60.0, 0.0)]);
    }

    #[test]
    fn missing_grid_is_reported_by_name() {
        let err = ProjectConfig::parse("[system]\n[analysis]\nsigma_thd = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grid"), "{msg}");
        assert!(!msg.contains('\n'));
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = "[system.grid]\nr_g = 0.2\nl_g = 4e-3\n[analysis]\nsigma = 0.1\n";
        let msg = ProjectConfig::parse(text).unwrap_err().to_string();
        assert!(msg.contains("sigma"), "{msg}");
        assert!(msg.contains("line 5"), "{msg}");
    }

    #[test]
    fn bad_values_are_rejected() {
        let text = "[system.grid]\nr_g = 0.2\nl_g = 4e-3\n[analysis]\nfreq_min_hz = 10.0\nfreq_max_hz = 1.0\n";
        assert!(matches!(ProjectConfig::parse(text), Err(Error::Config(_))));
        let text = "[system.grid]\nr_g = 0.2\nl_g = -1.0\n";
        assert!(ProjectConfig::parse(text).unwrap_err().to_string().contains("system.grid"));
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = ProjectConfig::case(0.15, 3e-3).unwrap();
        cfg.system.sad = Some(SadParams::default().with_tuning(1200.0, 0.7));
        let back = ProjectConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }
}
