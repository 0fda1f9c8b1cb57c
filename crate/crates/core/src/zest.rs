//! Grid impedance estimation from a reactive-current step.
//!
//! A device (normally the damper) steps its reactive reference. The dc
//! values of PCC voltage and grid current before and after the step are
//! expressed in one common dq frame: the pre-step PLL frame, extended past
//! the step by pure integration of the pre-step frequency. The differences
//! then satisfy the steady-state branch equations of the grid, which give
//! R_g and L_g by a 2×2 solve.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix2, Vector2};

use crate::simtime::{Action, Scenario, Simulator, Source, WaveRecord};
use crate::{Error, Result, OMEGA_50HZ};

/// Grid-current change below which the estimate is refused, A.
pub const NOISE_FLOOR: f64 = 0.5;

/// Differences of the aligned dc quantities across the step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deltas {
    pub dv_d: f64,
    pub dv_q: f64,
    pub di_gd: f64,
    pub di_gq: f64,
}

impl Deltas {
    /// Deltas produced by a branch (R_g, L_g) for a current change.
    pub fn forward(r_g: f64, l_g: f64, omega0: f64, di_gd: f64, di_gq: f64) -> Self {
        Self {
            dv_d: r_g * di_gd - omega0 * l_g * di_gq,
            dv_q: r_g * di_gq + omega0 * l_g * di_gd,
            di_gd,
            di_gq,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RgLg {
    pub r_g: f64,
    pub l_g: f64,
    /// 2-norm condition number of the solved matrix.
    pub cond: f64,
}

/// Solve `[ΔI_d, −ω₀ΔI_q; ΔI_q, ω₀ΔI_d]·[R; L] = [ΔV_d; ΔV_q]`.
pub fn solve_rg_lg(d: &Deltas, omega0: f64) -> Result<RgLg> {
    solve_rg_lg_with_floor(d, omega0, NOISE_FLOOR)
}

pub fn solve_rg_lg_with_floor(d: &Deltas, omega0: f64, floor: f64) -> Result<RgLg> {
    if !(omega0 > 0.0) {
        return Err(Error::param("omega0", "must be positive"));
    }
    let norm = d.di_gd.hypot(d.di_gq);
    if !(norm >= floor) {
        return Err(Error::InsufficientExcitation { norm, floor });
    }
    let m = Matrix2::new(d.di_gd, -omega0 * d.di_gq, d.di_gq, omega0 * d.di_gd);
    let sol = m
        .lu()
        .solve(&Vector2::new(d.dv_d, d.dv_q))
        .ok_or_else(|| Error::Degenerate("singular estimation matrix".into()))?;
    let sv = m.singular_values();
    let cond = sv.max() / sv.min();
    Ok(RgLg {
        r_g: sol[0],
        l_g: sol[1],
        cond,
    })
}

/// Park transform (amplitude invariant) in the frame
/// `θ(t) = θ₁ + ω_g·(t − t₁)`.
pub fn aligned_dq(abc: [f64; 3], theta1: f64, omega_g: f64, t: f64, t1: f64) -> (f64, f64) {
    park(abc, theta1 + omega_g * (t - t1))
}

pub fn park(abc: [f64; 3], theta: f64) -> (f64, f64) {
    let k = 2.0 / 3.0;
    let (a, b, c) = (theta, theta - 2.0 * PI / 3.0, theta + 2.0 * PI / 3.0);
    (
        k * (abc[0] * a.cos() + abc[1] * b.cos() + abc[2] * c.cos()),
        -k * (abc[0] * a.sin() + abc[1] * b.sin() + abc[2] * c.sin()),
    )
}

pub fn inverse_park(dq: (f64, f64), theta: f64) -> [f64; 3] {
    let ph = |off: f64| dq.0 * (theta + off).cos() - dq.1 * (theta + off).sin();
    [ph(0.0), ph(-2.0 * PI / 3.0), ph(2.0 * PI / 3.0)]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcEstimate {
    pub value: f64,
    pub settled: bool,
}

/// Final output of a first-order low-pass filter run over `signal`.
///
/// The filter starts at the first sample. The estimate counts as settled
/// when the filter output moved by less than `tol` over the last 100 ms,
/// relative to its magnitude (with a floor of one unit).
pub fn extract_dc(signal: &[f64], sample_rate: f64, cutoff_hz: f64, tol: f64) -> Result<DcEstimate> {
    if !(cutoff_hz > 0.0 && sample_rate > 0.0) {
        return Err(Error::param("cutoff", "cutoff and sample rate must be positive"));
    }
    let tau = 1.0 / (2.0 * PI * cutoff_hz);
    let needed = (5.0 * tau * sample_rate).ceil() as usize;
    if signal.len() <= needed {
        return Err(Error::param(
            "signal",
            format!("{} samples, need more than {needed}", signal.len()),
        ));
    }
    let alpha = 1.0 - (-1.0 / (tau * sample_rate)).exp();
    let lag = ((0.1 * sample_rate).round() as usize).clamp(1, signal.len() - 1);
    let mut y = signal[0];
    let mut hist = Vec::with_capacity(signal.len());
    for &x in signal {
        y += alpha * (x - y);
        hist.push(y);
    }
    let earlier = hist[hist.len() - 1 - lag];
    let settled = (y - earlier).abs() < tol * y.abs().max(1.0);
    Ok(DcEstimate { value: y, settled })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationConfig {
    /// Step of the reactive current injected into the PCC by the stepping
    /// device, A.
    pub delta_iqref: f64,
    pub t1: f64,
    pub t2: f64,
    pub lpf_cutoff_hz: f64,
    /// Allowed relative change of a filtered value over 100 ms.
    pub settle_tol: f64,
    /// Device that steps its reactive reference; `None` picks the damper.
    pub device: Option<usize>,
    pub seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            delta_iqref: 40.0,
            t1: 0.2,
            t2: 1.7,
            lpf_cutoff_hz: 5.0,
            settle_tol: 1e-3,
            device: None,
            seed: 0,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0 && self.t2 > self.t1) {
            return Err(Error::param("t2", "need 0 < t1 < t2"));
        }
        if self.delta_iqref == 0.0 || !self.delta_iqref.is_finite() {
            return Err(Error::param("delta_iqref", "must be finite and nonzero"));
        }
        if !(self.lpf_cutoff_hz > 0.0 && self.lpf_cutoff_hz < 0.1 * OMEGA_50HZ / (2.0 * PI)) {
            return Err(Error::param("lpf_cutoff_hz", "must lie well below the grid frequency"));
        }
        if !(self.settle_tol > 0.0) {
            return Err(Error::param("settle_tol", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationResult {
    pub r_g: f64,
    pub l_g: f64,
    pub deltas: Deltas,
    pub cond: f64,
    /// Same protocol evaluated in the live PLL frame at t₂.
    pub live_frame: Option<RgLg>,
    /// Rotation of the live PLL relative to the frozen frame at t₂, rad.
    pub frame_drift: f64,
    pub t2: f64,
}

impl EstimationResult {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "r_g_ohm = {}", self.r_g);
        let _ = writeln!(s, "l_g_h = {}", self.l_g);
        let _ = writeln!(s, "cond = {}", self.cond);
        let _ = writeln!(s, "dv_d = {}", self.deltas.dv_d);
        let _ = writeln!(s, "dv_q = {}", self.deltas.dv_q);
        let _ = writeln!(s, "di_gd = {}", self.deltas.di_gd);
        let _ = writeln!(s, "di_gq = {}", self.deltas.di_gq);
        let _ = writeln!(s, "frame_drift_rad = {}", self.frame_drift);
        let _ = writeln!(s, "t2_s = {}", self.t2);
        s
    }

    pub const CSV_HEADER: &'static str = "rg_true,lg_true,rg_est,lg_est,err_rg_pct,err_lg_pct,cond";

    pub fn csv_row(&self, r_true: f64, l_true: f64) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            r_true,
            l_true,
            self.r_g,
            self.l_g,
            100.0 * (self.r_g - r_true) / r_true,
            100.0 * (self.l_g - l_true) / l_true,
            self.cond
        )
    }
}

struct Channels<'a> {
    t: &'a [f64],
    v: (&'a [f64], &'a [f64]),
    i: (&'a [f64], &'a [f64]),
    delta: &'a [f64],
    omega: &'a [f64],
}

fn channels<'a>(w: &'a WaveRecord, dev: usize) -> Result<Channels<'a>> {
    let get = |n: String| {
        w.channel(&n)
            .ok_or_else(|| Error::param("record", format!("missing channel {n}")))
    };
    Ok(Channels {
        t: w.time(),
        v: (get("vd_V".into())?, get("vq_V".into())?),
        i: (get("igd_A".into())?, get("igq_A".into())?),
        delta: get(format!("delta_rad_{}", dev + 1))?,
        omega: get(format!("omega_radps_{}", dev + 1))?,
    })
}

/// Run the estimation protocol on `sc`'s system.
///
/// Events of the scenario run alongside the protocol; its duration is
/// ignored. The reactive reference is restored after the measurement.
pub fn run_estimation(sc: &Scenario, cfg: &EstimationConfig) -> Result<EstimationResult> {
    cfg.validate()?;
    sc.model.validate()?;
    let mut sim = Simulator::new(
        sc.device_specs()?,
        Source::Grid(sc.model.grid),
        sc.config.clone(),
        cfg.seed,
    )?;
    let dev = cfg
        .device
        .or(sim.sad_index())
        .ok_or_else(|| Error::param("device", "no damper to step and none chosen"))?;
    if dev >= sim.device_count() || sim.pll_state(dev).is_none() {
        return Err(Error::param("device", format!("device {dev} has no PLL")));
    }
    let iq0 = reactive_reference(sc, dev);
    // the damper's reference is for the current it draws from the PCC
    let sign = if Some(dev) == sim.sad_index() { -1.0 } else { 1.0 };

    let mut events: Vec<(f64, Option<Action>)> =
        sc.events.iter().map(|e| (e.t, Some(e.action))).collect();
    events.push((cfg.t1, None));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut step_applied = false;
    let mut t2 = cfg.t2;
    let run_to = |sim: &mut Simulator, t_end: f64, step_applied: &mut bool| -> Result<()> {
        for (t, act) in &events {
            if *t <= sim.time() - 0.5 * sim.h() || *t > t_end {
                continue;
            }
            if !sim.run_until(*t) {
                return Err(Error::Divergent { t: sim.time() });
            }
            match act {
                Some(a) => sim.apply(*a)?,
                None if !*step_applied => {
                    sim.apply(Action::SetIqRef {
                        device: dev,
                        value: iq0 + sign * cfg.delta_iqref,
                    })?;
                    *step_applied = true;
                }
                None => {}
            }
        }
        if !sim.run_until(t_end) {
            return Err(Error::Divergent { t: sim.time() });
        }
        Ok(())
    };
    run_to(&mut sim, t2, &mut step_applied)?;

    let mut attempt = 0;
    let (res, live, drift) = loop {
        match evaluate(sim.record(), dev, cfg, t2)? {
            Some(x) => break x,
            None if attempt == 0 => {
                attempt += 1;
                t2 += cfg.t2 - cfg.t1;
                log::info!("estimate not settled; extending t2 to {t2:.3} s");
                run_to(&mut sim, t2, &mut step_applied)?;
            }
            None => return Err(Error::Unsettled(format!("filtered values still moving at t2 = {t2:.3} s"))),
        }
    };
    sim.apply(Action::SetIqRef {
        device: dev,
        value: iq0,
    })?;
    Ok(EstimationResult {
        r_g: res.0.r_g,
        l_g: res.0.l_g,
        deltas: res.1,
        cond: res.0.cond,
        live_frame: live,
        frame_drift: drift,
        t2,
    })
}

fn reactive_reference(sc: &Scenario, dev: usize) -> f64 {
    use crate::stability::ShuntDevice;
    match sc.model.devices.get(dev) {
        Some(ShuntDevice::Gfl { i_q0, .. }) => *i_q0,
        _ => 0.0,
    }
}

type Evaluated = ((RgLg, Deltas), Option<RgLg>, f64);

fn evaluate(w: &WaveRecord, dev: usize, cfg: &EstimationConfig, t2: f64) -> Result<Option<Evaluated>> {
    let ch = channels(w, dev)?;
    let fs = w.sample_rate;
    let k1 = ch.t.partition_point(|&t| t <= cfg.t1 + 1e-12).saturating_sub(1);
    let k2 = ch.t.partition_point(|&t| t <= t2 + 1e-12);
    let dc = |x: &[f64]| extract_dc(x, fs, cfg.lpf_cutoff_hz, cfg.settle_tol);

    // the simulation frame has angle ω₀t; the PLL angle is ω₀t + δ
    let theta_at = |k: usize| OMEGA_50HZ * ch.t[k] + ch.delta[k];
    let to_frame = |k: usize, x: (f64, f64), theta: f64| {
        let abc = inverse_park(x, OMEGA_50HZ * ch.t[k]);
        park(abc, theta)
    };

    // pre-step: live PLL frame, which is steady
    let pre: Vec<[f64; 4]> = (0..=k1)
        .map(|k| {
            let th = theta_at(k);
            let v = to_frame(k, (ch.v.0[k], ch.v.1[k]), th);
            let i = to_frame(k, (ch.i.0[k], ch.i.1[k]), th);
            [v.0, v.1, i.0, i.1]
        })
        .collect();
    let theta1 = theta_at(k1);
    let omega_g = dc(&ch.omega[..=k1])?.value;
    let col = |rows: &[[f64; 4]], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
    let mut before = [0.0; 4];
    for (j, b) in before.iter_mut().enumerate() {
        *b = dc(&col(&pre, j))?.value;
    }

    let post = |live: bool| -> Vec<[f64; 4]> {
        (k1 + 1..k2)
            .map(|k| {
                let t = ch.t[k];
                let v_abc = inverse_park((ch.v.0[k], ch.v.1[k]), OMEGA_50HZ * t);
                let i_abc = inverse_park((ch.i.0[k], ch.i.1[k]), OMEGA_50HZ * t);
                let (v, i) = if live {
                    (park(v_abc, theta_at(k)), park(i_abc, theta_at(k)))
                } else {
                    (
                        aligned_dq(v_abc, theta1, omega_g, t, ch.t[k1]),
                        aligned_dq(i_abc, theta1, omega_g, t, ch.t[k1]),
                    )
                };
                [v.0, v.1, i.0, i.1]
            })
            .collect()
    };
    let frozen = post(false);
    let mut after = [0.0; 4];
    for (j, a) in after.iter_mut().enumerate() {
        let e = dc(&col(&frozen, j))?;
        if !e.settled {
            return Ok(None);
        }
        *a = e.value;
    }
    let deltas = Deltas {
        dv_d: after[0] - before[0],
        dv_q: after[1] - before[1],
        di_gd: after[2] - before[2],
        di_gq: after[3] - before[3],
    };
    let sol = solve_rg_lg(&deltas, omega_g)?;

    let live_rows = post(true);
    let mut live_after = [0.0; 4];
    for (j, a) in live_after.iter_mut().enumerate() {
        *a = dc(&col(&live_rows, j))?.value;
    }
    let live = solve_rg_lg(
        &Deltas {
            dv_d: live_after[0] - before[0],
            dv_q: live_after[1] - before[1],
            di_gd: live_after[2] - before[2],
            di_gq: live_after[3] - before[3],
        },
        omega_g,
    )
    .ok();
    let k_end = k2 - 1;
    let drift = theta_at(k_end) - (theta1 + omega_g * (ch.t[k_end] - ch.t[k1]));
    Ok(Some(((sol, deltas), live, drift)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn reference_readouts_solve() {
        let d = Deltas {
            dv_d: -37.86,
            dv_q: 5.20,
            di_gd: -0.85,
            di_gq: 40.90,
        };
        let s = solve_rg_lg(&d, 100.0 * PI).unwrap();
        assert!((s.r_g / 0.146 - 1.0).abs() < 0.005, "{}", s.r_g);
        assert!((s.l_g / 2.937e-3 - 1.0).abs() < 0.005, "{}", s.l_g);
        assert!(s.cond.is_finite());
    }

    #[test]
    fn pure_branches() {
        let r = solve_rg_lg(
            &Deltas {
                dv_d: -10.0,
                dv_q: 0.0,
                di_gd: -20.0,
                di_gq: 0.0,
            },
            100.0 * PI,
        )
        .unwrap();
        assert_relative_eq!(r.r_g, 0.5, epsilon = 1e-12);
        assert!(r.l_g.abs() < 1e-15);
        let l = solve_rg_lg(
            &Deltas {
                dv_d: -12.566,
                dv_q: 0.0,
                di_gd: 0.0,
                di_gq: 40.0,
            },
            100.0 * PI,
        )
        .unwrap();
        assert!(l.r_g.abs() < 1e-12);
        assert!((l.l_g - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn tiny_step_refused() {
        let e = solve_rg_lg(
            &Deltas {
                dv_d: 0.1,
                dv_q: 0.0,
                di_gd: 0.2,
                di_gq: 0.3,
            },
            OMEGA_50HZ,
        );
        assert!(matches!(e, Err(Error::InsufficientExcitation { .. })));
    }

    proptest! {
        #[test]
        fn forward_model_round_trip(r in 0.001f64..2.0, l in 1e-5f64..2e-2,
                                    id in -80.0f64..80.0, iq in -80.0f64..80.0) {
            prop_assume!(id.hypot(iq) > 1.0);
            let d = Deltas::forward(r, l, OMEGA_50HZ, id, iq);
            let s = solve_rg_lg(&d, OMEGA_50HZ).unwrap();
            prop_assert!((s.r_g - r).abs() <= 1e-12 * (1.0 + r));
            prop_assert!((s.l_g - l).abs() <= 1e-12 * (1.0 + l));
        }
    }

    #[test]
    fn park_of_locked_sinusoid() {
        let theta1 = 0.3;
        let w = OMEGA_50HZ;
        let sig = |t: f64| {
            let th = theta1 + w * (t - 0.1);
            inverse_park((310.0, 0.0), th)
        };
        let (d, q) = aligned_dq(sig(0.1), theta1, w, 0.1, 0.1);
        assert_relative_eq!(d, 310.0, epsilon = 1e-9);
        assert!(q.abs() < 1e-9);
        let (d2, q2) = aligned_dq(sig(0.12), theta1, w, 0.12, 0.1);
        assert_relative_eq!(d2, d, epsilon = 1e-9);
        assert_relative_eq!(q2, q, epsilon = 1e-9);
    }

    #[test]
    fn dc_extraction() {
        let fs = 5000.0;
        let c: Vec<f64> = vec![42.0; 5000];
        let e = extract_dc(&c, fs, 5.0, 1e-3).unwrap();
        assert_relative_eq!(e.value, 42.0);
        assert!(e.settled);

        let amp = 10.0;
        let rip: Vec<f64> = (0..5000)
            .map(|k| 42.0 + amp * (2.0 * PI * 100.0 * k as f64 / fs).sin())
            .collect();
        let e = extract_dc(&rip, fs, 5.0, 1e-3).unwrap();
        // first-order attenuation at 100 Hz is 1/√(1 + 20²) ≈ 5%
        let atten = 1.0 / (1.0 + (100.0f64 / 5.0).powi(2)).sqrt();
        assert!((atten - 0.05).abs() < 1e-3);
        assert!((e.value - 42.0).abs() <= 0.05 * amp, "{}", e.value);

        let ramp: Vec<f64> = (0..5000).map(|k| k as f64 / fs * 50.0).collect();
        assert!(!extract_dc(&ramp, fs, 5.0, 1e-3).unwrap().settled);

        assert!(extract_dc(&c[..100], fs, 5.0, 1e-3).is_err());
    }
}
