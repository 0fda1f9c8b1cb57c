//! Averaged time-domain dq simulator.
//!
//! The simulation frame rotates at ω₀ and is aligned with the grid source.
//! Plant states (device filter currents and the damper dc-link voltage) are
//! integrated with classical RK4 at a fixed step; the PCC node has no
//! capacitance, so its voltage follows algebraically from the branch
//! equations. Every controller runs at its own sampling rate and its output
//! is applied one sample later and held, which gives the 1.5-sample average
//! delay of the small-signal models.

mod detect;
pub(crate) mod devices;
mod record;
mod scan;

pub use detect::{detect_instability, InstabilityVerdict, OracleVerdict};
pub use record::WaveRecord;
pub use scan::{scan_admittance, DeviceUnderTest, ScanOptions};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::plants::{steady_pcc_voltage, GflParams, GridParams, SadParams};
use crate::stability::{ShuntDevice, SystemModel};
use crate::{Error, Result, OMEGA_50HZ};
use devices::{rot, GflCtrl, SadCtrl};

/// Peak phase voltage reachable with space-vector modulation is V_dc/√3.
const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Plant integration step, s.
    pub h: f64,
    /// Rate of the recorded waveforms, Hz.
    pub record_rate_hz: f64,
    /// Currents above `divergence_factor × rated_current` stop the run.
    pub rated_current: f64,
    pub divergence_factor: f64,
    /// Standard deviation of additive measurement noise on sampled
    /// voltages (V) and currents (A).
    pub noise_v: f64,
    pub noise_i: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            h: 2e-6,
            record_rate_hz: 5000.0,
            rated_current: 100.0,
            divergence_factor: 100.0,
            noise_v: 0.0,
            noise_i: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DeviceSpec {
    Gfl {
        params: GflParams,
        i_dref: f64,
        i_qref: f64,
    },
    Sad(SadParams),
    /// Series R-L branch from the PCC to ground (neutral).
    Passive { r: f64, l: f64 },
}

impl DeviceSpec {
    fn inductance(&self) -> f64 {
        match self {
            DeviceSpec::Gfl { params, .. } => params.l,
            DeviceSpec::Sad(p) => p.l_f,
            DeviceSpec::Passive { l, .. } => *l,
        }
    }

    fn resistance(&self) -> f64 {
        match self {
            DeviceSpec::Gfl { params, .. } => params.r_l,
            DeviceSpec::Sad(p) => p.r_f,
            DeviceSpec::Passive { r, .. } => *r,
        }
    }

    fn f_s(&self) -> Option<f64> {
        match self {
            DeviceSpec::Gfl { params, .. } => Some(params.f_s),
            DeviceSpec::Sad(p) => Some(p.f_s),
            DeviceSpec::Passive { .. } => None,
        }
    }
}

/// What the PCC is connected to besides the devices.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    /// Stiff source behind the grid branch.
    Grid(GridParams),
    /// PCC voltage imposed directly: `base + amp·cos(2πf·t)` (dq, sim frame).
    Stiff {
        base: (f64, f64),
        amp: (f64, f64),
        f_hz: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    SetIdRef { device: usize, value: f64 },
    RampIdRef { device: usize, target: f64, duration: f64 },
    SetIqRef { device: usize, value: f64 },
    SetDamping { device: usize, enabled: bool },
    SetSadTuning { device: usize, omega_c: f64, h_v: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub action: Action,
}

/// Time-domain experiment on a [`SystemModel`].
#[derive(Clone, Debug)]
pub struct Scenario {
    pub model: SystemModel,
    pub events: Vec<Event>,
    pub duration: f64,
    pub config: SimConfig,
}

impl Scenario {
    pub fn new(model: SystemModel, duration: f64) -> Self {
        Self {
            model,
            events: Vec::new(),
            duration,
            config: SimConfig::default(),
        }
    }

    pub fn with_event(mut self, t: f64, action: Action) -> Self {
        self.events.push(Event { t, action });
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::param("events", "must be time-ordered"));
        }
        if let Some(last) = self.events.last() {
            if !(self.duration > last.t) {
                return Err(Error::param("duration", "must exceed the last event time"));
            }
        }
        if !(self.duration > 0.0) {
            return Err(Error::param("duration", "must be positive"));
        }
        Ok(())
    }

    /// Devices in simulator order: inverters first, damper last.
    pub fn device_specs(&self) -> Result<Vec<DeviceSpec>> {
        let mut out = Vec::new();
        for d in &self.model.devices {
            match d {
                ShuntDevice::Gfl { params, i_d0, i_q0 } => out.push(DeviceSpec::Gfl {
                    params: *params,
                    i_dref: *i_d0,
                    i_qref: *i_q0,
                }),
                ShuntDevice::Fixed(_) => {
                    return Err(Error::param(
                        "devices",
                        "fixed admittances have no time-domain model",
                    ))
                }
            }
        }
        if let Some(sp) = self.model.sad {
            out.push(DeviceSpec::Sad(sp));
        }
        Ok(out)
    }
}

enum Ctrl {
    Gfl(GflCtrl),
    Sad(SadCtrl),
    None,
}

struct Device {
    spec: DeviceSpec,
    ctrl: Ctrl,
    l: f64,
    r: f64,
    period: u64,
    /// Converter voltage command being applied (sim frame). For the damper
    /// it is stored as a duty, normalized by the sampled dc voltage.
    applied: (f64, f64),
    pending: (f64, f64),
    saturations: usize,
}

/// Single-owner state machine for one run.
pub struct Simulator {
    devices: Vec<Device>,
    source: Source,
    cfg: SimConfig,
    /// [i_d, i_q] per device (current injected into the PCC), then V_dc of
    /// the damper if present.
    x: Vec<f64>,
    sad_index: Option<usize>,
    step: u64,
    record_every: u64,
    record: WaveRecord,
    divergent: bool,
    rng: ChaCha8Rng,
    noise: Option<(Normal<f64>, Normal<f64>)>,
}

impl Simulator {
    /// Simulator preset at the analytic equilibrium of `devices` fed from
    /// `source`. Damper current starts at zero.
    pub fn new(devices: Vec<DeviceSpec>, source: Source, cfg: SimConfig, seed: u64) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::param("devices", "nothing to simulate"));
        }
        if !(cfg.h > 0.0) {
            return Err(Error::param("h", "must be positive"));
        }
        let max_fs = devices.iter().filter_map(|d| d.f_s()).fold(0.0, f64::max);
        if max_fs > 0.0 && cfg.h > 1.0 / (10.0 * max_fs) * (1.0 + 1e-9) {
            return Err(Error::param("h", "must be at most 1/(10·f_s)"));
        }
        let sads = devices
            .iter()
            .filter(|d| matches!(d, DeviceSpec::Sad(_)))
            .count();
        if sads > 1 {
            return Err(Error::param("devices", "at most one damper"));
        }
        if let Source::Grid(gp) = &source {
            gp.validate()?;
        }

        // steady injected current per device in the PCC frame
        let i_pcc: Vec<(f64, f64)> = devices
            .iter()
            .map(|d| match d {
                DeviceSpec::Gfl { i_dref, i_qref, .. } => (*i_dref, *i_qref),
                _ => (0.0, 0.0),
            })
            .collect();
        let (v_d0, phi) = match &source {
            Source::Grid(gp) => {
                let total = i_pcc
                    .iter()
                    .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
                if devices.iter().any(|d| matches!(d, DeviceSpec::Passive { .. })) {
                    return Err(Error::param(
                        "devices",
                        "passive branches are only supported with a stiff source",
                    ));
                }
                let v = steady_pcc_voltage(gp, total)?;
                let x = gp.omega0 * gp.l_g;
                let d0 = gp.r_g * total.0 - x * total.1;
                let d1 = x * total.0 + gp.r_g * total.1;
                // source phasor in the PCC frame is (v − d0, −d1)
                (v, (d1).atan2(v - d0))
            }
            Source::Stiff { base, .. } => {
                let m = (base.0 * base.0 + base.1 * base.1).sqrt();
                (m, base.1.atan2(base.0))
            }
        };
        if !(v_d0 > 0.0) {
            return Err(Error::InvalidOperatingPoint("PCC voltage not positive".into()));
        }

        let mut x = Vec::with_capacity(2 * devices.len() + 1);
        let mut built = Vec::with_capacity(devices.len());
        let mut sad_index = None;
        for (k, spec) in devices.into_iter().enumerate() {
            let (l, r) = (spec.inductance(), spec.resistance());
            if !(l > 0.0) {
                return Err(Error::param("l", "device inductance must be positive"));
            }
            let i0 = i_pcc[k];
            let i_sim = rot(i0, phi);
            x.push(i_sim.0);
            x.push(i_sim.1);
            let period = match spec.f_s() {
                Some(fs) => {
                    let p = (1.0 / (fs * cfg.h)).round();
                    if ((1.0 / (fs * cfg.h)) - p).abs() > 1e-6 * p {
                        return Err(Error::param(
                            "h",
                            "controller period must be an integer number of steps",
                        ));
                    }
                    p as u64
                }
                None => u64::MAX,
            };
            let (ctrl, applied) = match &spec {
                DeviceSpec::Gfl { params, .. } => {
                    params.validate()?;
                    let lw = OMEGA_50HZ * params.l;
                    let vm0 = (
                        v_d0 + params.r_l * i0.0 - lw * i0.1,
                        params.r_l * i0.1 + lw * i0.0,
                    );
                    let c = GflCtrl::new(params, phi, vm0, i0);
                    (Ctrl::Gfl(c), rot(vm0, phi))
                }
                DeviceSpec::Sad(p) => {
                    p.validate()?;
                    sad_index = Some(k);
                    let c = SadCtrl::new(p, phi, (v_d0, 0.0), (0.0, 0.0))?;
                    let vm = rot((v_d0, 0.0), phi);
                    (Ctrl::Sad(c), (vm.0 / p.v_dc, vm.1 / p.v_dc))
                }
                DeviceSpec::Passive { .. } => (Ctrl::None, (0.0, 0.0)),
            };
            built.push(Device {
                spec,
                ctrl,
                l,
                r,
                period,
                applied,
                pending: applied,
                saturations: 0,
            });
        }
        if let Some(k) = sad_index {
            if let DeviceSpec::Sad(p) = &built[k].spec {
                x.push(p.v_dc);
            }
        }
        let record_every = (1.0 / (cfg.record_rate_hz * cfg.h)).round().max(1.0) as u64;
        let mut names = vec![
            "t_s".to_string(),
            "vd_V".into(),
            "vq_V".into(),
            "igd_A".into(),
            "igq_A".into(),
        ];
        for (k, d) in built.iter().enumerate() {
            let id = k + 1;
            names.push(format!("id_A_{id}"));
            names.push(format!("iq_A_{id}"));
            if !matches!(d.ctrl, Ctrl::None) {
                names.push(format!("delta_rad_{id}"));
                names.push(format!("omega_radps_{id}"));
            }
            if matches!(d.ctrl, Ctrl::Sad(_)) {
                names.push(format!("vdc_V_{id}"));
            }
        }
        let sample_rate = 1.0 / (record_every as f64 * cfg.h);
        let noise = if cfg.noise_v > 0.0 || cfg.noise_i > 0.0 {
            Some((
                Normal::new(0.0, cfg.noise_v.max(0.0)).map_err(|e| Error::param("noise_v", e.to_string()))?,
                Normal::new(0.0, cfg.noise_i.max(0.0)).map_err(|e| Error::param("noise_i", e.to_string()))?,
            ))
        } else {
            None
        };
        let mut sim = Self {
            devices: built,
            source,
            cfg,
            x,
            sad_index,
            step: 0,
            record_every,
            record: WaveRecord::new(names, sample_rate),
            divergent: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
        };
        sim.push_record();
        Ok(sim)
    }

    /// Simulator for a scenario's system in grid mode.
    pub fn from_scenario(sc: &Scenario, seed: u64) -> Result<Self> {
        sc.validate()?;
        Self::new(
            sc.device_specs()?,
            Source::Grid(sc.model.grid),
            sc.config.clone(),
            seed,
        )
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.h
    }

    pub fn h(&self) -> f64 {
        self.cfg.h
    }

    pub fn is_divergent(&self) -> bool {
        self.divergent
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn sad_index(&self) -> Option<usize> {
        self.sad_index
    }

    /// Current injected into the PCC by device `k` (sim frame).
    pub fn device_current(&self, k: usize) -> (f64, f64) {
        (self.x[2 * k], self.x[2 * k + 1])
    }

    pub fn grid_current(&self) -> (f64, f64) {
        (0..self.devices.len()).fold((0.0, 0.0), |a, k| {
            let i = self.device_current(k);
            (a.0 + i.0, a.1 + i.1)
        })
    }

    pub fn pcc_voltage(&self) -> (f64, f64) {
        let t = self.time();
        let x = self.x.clone();
        self.pcc(&x, t, &self.converter_voltages(&x))
    }

    pub fn dc_voltage(&self) -> Option<f64> {
        self.sad_index.map(|_| self.x[2 * self.devices.len()])
    }

    /// `(δ, ω)` of device `k`'s PLL.
    pub fn pll_state(&self, k: usize) -> Option<(f64, f64)> {
        match &self.devices.get(k)?.ctrl {
            Ctrl::Gfl(c) => Some((c.pll.delta, c.pll.omega())),
            Ctrl::Sad(c) => Some((c.pll.delta, c.pll.omega())),
            Ctrl::None => None,
        }
    }

    pub fn saturation_events(&self) -> usize {
        self.devices.iter().map(|d| d.saturations).sum()
    }

    pub fn set_source(&mut self, source: Source) {
        self.source = source;
    }

    /// Hold the PLL angles and slow outer loops of every controller.
    pub fn freeze_outer_loops(&mut self, frozen: bool) {
        for d in &mut self.devices {
            match &mut d.ctrl {
                Ctrl::Gfl(c) => c.frozen = frozen,
                Ctrl::Sad(c) => c.frozen = frozen,
                Ctrl::None => {}
            }
        }
    }

    pub fn apply(&mut self, action: Action) -> Result<()> {
        let t = self.time();
        let dev = |k: usize| Error::param("device", format!("no device {k}"));
        match action {
            Action::SetIdRef { device, value } => match self.devices.get_mut(device).map(|d| &mut d.ctrl) {
                Some(Ctrl::Gfl(c)) => c.i_dref.set(value),
                _ => return Err(dev(device)),
            },
            Action::RampIdRef {
                device,
                target,
                duration,
            } => match self.devices.get_mut(device).map(|d| &mut d.ctrl) {
                Some(Ctrl::Gfl(c)) => c.i_dref.ramp(t, duration, target),
                _ => return Err(dev(device)),
            },
            Action::SetIqRef { device, value } => match self.devices.get_mut(device).map(|d| &mut d.ctrl) {
                Some(Ctrl::Gfl(c)) => c.i_qref.set(value),
                // the damper's reference is for the current it draws
                Some(Ctrl::Sad(c)) => c.i_qref.set(value),
                _ => return Err(dev(device)),
            },
            Action::SetDamping { device, enabled } => match self.devices.get_mut(device).map(|d| &mut d.ctrl) {
                Some(Ctrl::Sad(c)) => c.damping = enabled,
                _ => return Err(dev(device)),
            },
            Action::SetSadTuning {
                device,
                omega_c,
                h_v,
            } => {
                let v0 = {
                    let d = self.devices.get(device).ok_or_else(|| dev(device))?;
                    match (&d.spec, &d.ctrl) {
                        (DeviceSpec::Sad(_), Ctrl::Sad(_)) => {}
                        _ => return Err(dev(device)),
                    }
                    self.pcc_voltage()
                };
                let d = &mut self.devices[device];
                if let (DeviceSpec::Sad(p), Ctrl::Sad(c)) = (&mut d.spec, &mut d.ctrl) {
                    let np = p.with_tuning(omega_c, h_v);
                    np.validate()?;
                    let vc = rot(v0, -c.pll.delta);
                    let fresh = SadCtrl::new(&np, c.pll.delta, vc, (0.0, 0.0))?;
                    c.retune(&fresh);
                    *p = np;
                }
            }
        }
        Ok(())
    }

    fn converter_voltages(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let vdc = self.sad_index.map(|_| x[2 * self.devices.len()]);
        self.devices
            .iter()
            .map(|d| match d.ctrl {
                Ctrl::Sad(_) => {
                    let v = vdc.unwrap_or(0.0);
                    (d.applied.0 * v, d.applied.1 * v)
                }
                _ => d.applied,
            })
            .collect()
    }

    fn pcc(&self, x: &[f64], t: f64, e: &[(f64, f64)]) -> (f64, f64) {
        match &self.source {
            Source::Stiff { base, amp, f_hz } => {
                let c = (2.0 * std::f64::consts::PI * f_hz * t).cos();
                (base.0 + amp.0 * c, base.1 + amp.1 * c)
            }
            Source::Grid(gp) => {
                let mut ig = (0.0, 0.0);
                for k in 0..self.devices.len() {
                    ig.0 += x[2 * k];
                    ig.1 += x[2 * k + 1];
                }
                let eg = (gp.v_g, 0.0);
                if gp.l_g == 0.0 {
                    return (eg.0 + gp.r_g * ig.0, eg.1 + gp.r_g * ig.1);
                }
                // Σ_k (e_k − v − R_k i_k − ω₀L_k J i_k)/L_k
                //   = (v − e_g − R_g i_g − ω₀L_g J i_g)/L_g
                let mut num = (0.0, 0.0);
                let mut den = 1.0 / gp.l_g;
                for (k, d) in self.devices.iter().enumerate() {
                    let i = (x[2 * k], x[2 * k + 1]);
                    num.0 += (e[k].0 - d.r * i.0) / d.l + OMEGA_50HZ * i.1;
                    num.1 += (e[k].1 - d.r * i.1) / d.l - OMEGA_50HZ * i.0;
                    den += 1.0 / d.l;
                }
                num.0 += (eg.0 + gp.r_g * ig.0) / gp.l_g - gp.omega0 * ig.1;
                num.1 += (eg.1 + gp.r_g * ig.1) / gp.l_g + gp.omega0 * ig.0;
                (num.0 / den, num.1 / den)
            }
        }
    }

    fn deriv(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let e = self.converter_voltages(x);
        let v = self.pcc(x, t, &e);
        let n = self.devices.len();
        for (k, d) in self.devices.iter().enumerate() {
            let i = (x[2 * k], x[2 * k + 1]);
            out[2 * k] = (e[k].0 - v.0 - d.r * i.0 + OMEGA_50HZ * d.l * i.1) / d.l;
            out[2 * k + 1] = (e[k].1 - v.1 - d.r * i.1 - OMEGA_50HZ * d.l * i.0) / d.l;
        }
        if let Some(s) = self.sad_index {
            if let DeviceSpec::Sad(p) = &self.devices[s].spec {
                let vdc = x[2 * n];
                // power absorbed from the ac side by the damper converter
                let i_sad = (-x[2 * s], -x[2 * s + 1]);
                let pw = 1.5 * (e[s].0 * i_sad.0 + e[s].1 * i_sad.1);
                out[2 * n] = pw / (p.c_dc * vdc);
            }
        }
    }

    fn sample_controllers(&mut self) {
        let t = self.time();
        let x = self.x.clone();
        let e = self.converter_voltages(&x);
        let mut v = self.pcc(&x, t, &e);
        if let Some((nv, _)) = &self.noise {
            v.0 += nv.sample(&mut self.rng);
            v.1 += nv.sample(&mut self.rng);
        }
        let vdc = self.dc_voltage();
        for k in 0..self.devices.len() {
            if self.step % self.devices[k].period != 0 {
                continue;
            }
            let mut i = (x[2 * k], x[2 * k + 1]);
            if let Some((_, ni)) = &self.noise {
                i.0 += ni.sample(&mut self.rng);
                i.1 += ni.sample(&mut self.rng);
            }
            let d = &mut self.devices[k];
            d.applied = d.pending;
            let (cmd, limit, scale) = match (&mut d.ctrl, &d.spec) {
                (Ctrl::Gfl(c), _) => (c.sample(t, v, i), c.v_dc / SQRT_3, 1.0),
                (Ctrl::Sad(c), DeviceSpec::Sad(_)) => {
                    let vdc = vdc.unwrap_or(c.vdc_ref);
                    let cmd = c.sample(t, v, (-i.0, -i.1), vdc);
                    (cmd, vdc / SQRT_3, 1.0 / vdc)
                }
                _ => continue,
            };
            let mag = (cmd.0 * cmd.0 + cmd.1 * cmd.1).sqrt();
            let cmd = if mag > limit {
                d.saturations += 1;
                (cmd.0 * limit / mag, cmd.1 * limit / mag)
            } else {
                cmd
            };
            d.pending = (cmd.0 * scale, cmd.1 * scale);
        }
    }

    fn rk4(&mut self) {
        let h = self.cfg.h;
        let t = self.time();
        let n = self.x.len();
        let x0 = self.x.clone();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.deriv(&x0, t, &mut k1);
        for j in 0..n {
            tmp[j] = x0[j] + 0.5 * h * k1[j];
        }
        self.deriv(&tmp, t + 0.5 * h, &mut k2);
        for j in 0..n {
            tmp[j] = x0[j] + 0.5 * h * k2[j];
        }
        self.deriv(&tmp, t + 0.5 * h, &mut k3);
        for j in 0..n {
            tmp[j] = x0[j] + h * k3[j];
        }
        self.deriv(&tmp, t + h, &mut k4);
        for j in 0..n {
            self.x[j] = x0[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }

    fn check_divergence(&mut self) {
        let limit = self.cfg.divergence_factor * self.cfg.rated_current;
        let n = self.devices.len();
        let bad_i = (0..n).any(|k| {
            let (a, b) = (self.x[2 * k], self.x[2 * k + 1]);
            !(a.is_finite() && b.is_finite()) || (a * a + b * b).sqrt() > limit
        });
        let bad_v = self.dc_voltage().is_some_and(|v| {
            let nominal = self.devices[self.sad_index.unwrap_or(0)]
                .spec
                .clone();
            let vref = match nominal {
                DeviceSpec::Sad(p) => p.v_dc,
                _ => 1.0,
            };
            !v.is_finite() || v <= 0.0 || v > self.cfg.divergence_factor * vref
        });
        if bad_i || bad_v {
            self.divergent = true;
            log::warn!("simulation diverged at t = {:.4} s", self.time());
        }
    }

    fn push_record(&mut self) {
        let t = self.time();
        let v = self.pcc_voltage();
        let ig = self.grid_current();
        let mut row = vec![t, v.0, v.1, ig.0, ig.1];
        for k in 0..self.devices.len() {
            let i = self.device_current(k);
            row.push(i.0);
            row.push(i.1);
            match &self.devices[k].ctrl {
                Ctrl::Gfl(c) => {
                    row.push(c.pll.delta);
                    row.push(c.pll.omega());
                }
                Ctrl::Sad(c) => {
                    row.push(c.pll.delta);
                    row.push(c.pll.omega());
                    row.push(self.dc_voltage().unwrap_or(0.0));
                }
                Ctrl::None => {}
            }
        }
        self.record.push_row(&row);
    }

    /// Advance one plant step. Returns `false` once the run has diverged.
    pub fn step(&mut self) -> bool {
        if self.divergent {
            return false;
        }
        self.sample_controllers();
        self.rk4();
        self.step += 1;
        self.check_divergence();
        if self.divergent {
            return false;
        }
        if self.step % self.record_every == 0 {
            self.push_record();
        }
        true
    }

    /// Step until `t_end` (or divergence).
    pub fn run_until(&mut self, t_end: f64) -> bool {
        let target = (t_end / self.cfg.h).round() as u64;
        while self.step < target {
            if !self.step() {
                return false;
            }
        }
        true
    }

    /// Run to `t_end` calling `observe` after every plant step.
    pub fn run_with<F: FnMut(&Simulator)>(&mut self, t_end: f64, mut observe: F) -> bool {
        let target = (t_end / self.cfg.h).round() as u64;
        while self.step < target {
            if !self.step() {
                return false;
            }
            observe(self);
        }
        true
    }

    pub fn record(&self) -> &WaveRecord {
        &self.record
    }

    pub fn finish(mut self) -> WaveRecord {
        self.record.divergent = self.divergent;
        self.record.saturation_events = self.saturation_events();
        self.record
    }
}

/// Run a scenario to completion (or divergence).
pub fn simulate(sc: &Scenario, seed: u64) -> Result<WaveRecord> {
    let mut sim = Simulator::from_scenario(sc, seed)?;
    for ev in &sc.events {
        if !sim.run_until(ev.t) {
            return Ok(sim.finish());
        }
        sim.apply(ev.action)?;
    }
    sim.run_until(sc.duration);
    Ok(sim.finish())
}
