use num_complex::Complex64;
use rayon::prelude::*;

use super::{DeviceSpec, SimConfig, Simulator, Source};
use crate::dqcore::{DqMatrix, FrequencyGrid};
use crate::plants::{GflParams, SadParams};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DeviceUnderTest {
    Gfl {
        params: GflParams,
        i_d0: f64,
        i_q0: f64,
    },
    Sad(SadParams),
    Passive {
        r: f64,
        l: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOptions {
    /// Perturbation amplitude in V; `None` means 1% of `V_d0`.
    pub amplitude: Option<f64>,
    /// Time allowed for the start-up transient before projecting, s.
    pub settle: f64,
    /// Minimum projection window, s (rounded up to whole cycles).
    pub min_window: f64,
    pub min_cycles: usize,
    /// Allowed relative change between two consecutive windows.
    pub drift_tol: f64,
    /// Hold PLL angles and dc-voltage loops during the scan.
    pub freeze_outer_loops: bool,
    pub config: SimConfig,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            amplitude: None,
            settle: 0.3,
            min_window: 0.1,
            min_cycles: 3,
            drift_tol: 0.02,
            freeze_outer_loops: false,
            config: SimConfig::default(),
        }
    }
}

fn spec_of(dut: &DeviceUnderTest) -> DeviceSpec {
    match dut {
        DeviceUnderTest::Gfl { params, i_d0, i_q0 } => DeviceSpec::Gfl {
            params: *params,
            i_dref: *i_d0,
            i_qref: *i_q0,
        },
        DeviceUnderTest::Sad(p) => DeviceSpec::Sad(*p),
        DeviceUnderTest::Passive { r, l } => DeviceSpec::Passive { r: *r, l: *l },
    }
}

/// Current phasor response to one perturbation direction, from two
/// consecutive windows.
fn one_direction(
    dut: &DeviceUnderTest,
    v_d0: f64,
    f_hz: f64,
    amp: (f64, f64),
    settle: f64,
    opts: &ScanOptions,
) -> Result<([Complex64; 2], [Complex64; 2])> {
    let mut sim = Simulator::new(
        vec![spec_of(dut)],
        Source::Stiff {
            base: (v_d0, 0.0),
            amp,
            f_hz,
        },
        SimConfig {
            record_rate_hz: 100.0,
            ..opts.config.clone()
        },
        0,
    )?;
    sim.freeze_outer_loops(opts.freeze_outer_loops);
    let h = sim.h();
    let cycles = ((opts.min_window * f_hz).ceil() as usize).max(opts.min_cycles);
    let window = cycles as f64 / f_hz;
    let n = (window / h).round() as usize;
    if !sim.run_until(settle) {
        return Err(Error::ScanRefused(format!(
            "device diverged while settling at {f_hz} Hz"
        )));
    }
    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
    for slot in out.iter_mut() {
        let mut buf_d = Vec::with_capacity(n);
        let mut buf_q = Vec::with_capacity(n);
        let mut times = Vec::with_capacity(n);
        for _ in 0..n {
            if !sim.step() {
                return Err(Error::ScanRefused(format!(
                    "device diverged during projection at {f_hz} Hz"
                )));
            }
            let i = sim.device_current(0);
            buf_d.push(i.0);
            buf_q.push(i.1);
            times.push(sim.time());
        }
        let w = 2.0 * std::f64::consts::PI * f_hz;
        let project = |x: &[f64]| {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let mut acc = Complex64::new(0.0, 0.0);
            for (v, t) in x.iter().zip(&times) {
                acc += Complex64::from_polar(v - mean, -w * t);
            }
            acc * (2.0 / x.len() as f64)
        };
        *slot = [project(&buf_d), project(&buf_q)];
    }
    Ok((out[0], out[1]))
}

fn drift(a: &[Complex64; 2], b: &[Complex64; 2]) -> f64 {
    let scale = b[0].norm().max(b[1].norm()).max(1e-12);
    (a[0] - b[0]).norm().max((a[1] - b[1]).norm()) / scale
}

fn scan_one(dut: &DeviceUnderTest, v_d0: f64, f_hz: f64, opts: &ScanOptions) -> Result<DqMatrix> {
    let a = opts.amplitude.unwrap_or(0.01 * v_d0);
    let mut y = DqMatrix::zero();
    for (col, amp) in [(a, 0.0), (0.0, a)].into_iter().enumerate() {
        let mut settle = opts.settle;
        let mut attempt = 0;
        let cur = loop {
            let (w1, w2) = one_direction(dut, v_d0, f_hz, amp, settle, opts)?;
            let d = drift(&w1, &w2);
            if d <= opts.drift_tol {
                break w2;
            }
            attempt += 1;
            if attempt > 1 {
                return Err(Error::ScanNotSettled { f_hz, drift: d });
            }
            log::debug!("scan at {f_hz} Hz drifted by {d:.4}; retrying with longer settle");
            settle *= 3.0;
        };
        // admittance relates the perturbation to the current drawn
        let yd = -cur[0] / a;
        let yq = -cur[1] / a;
        if col == 0 {
            y.dd = yd;
            y.qd = yq;
        } else {
            y.dq = yd;
            y.qq = yq;
        }
    }
    Ok(y)
}

/// Measure the dq admittance of a device by small-signal voltage
/// perturbation at its terminals, one frequency at a time.
pub fn scan_admittance(
    dut: &DeviceUnderTest,
    v_d0: f64,
    freqs: &FrequencyGrid,
    opts: &ScanOptions,
) -> Result<Vec<DqMatrix>> {
    if !(v_d0 > 0.0) {
        return Err(Error::InvalidOperatingPoint("V_d0 must be positive".into()));
    }
    let nyq = 0.5 / opts.config.h;
    if freqs.max() >= nyq {
        return Err(Error::InvalidGrid("scan frequency above the plant Nyquist rate".into()));
    }
    freqs
        .freqs()
        .par_iter()
        .map(|&f| scan_one(dut, v_d0, f, opts))
        .collect()
}
