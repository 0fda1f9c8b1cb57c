//! Sampled controllers of the simulated devices.

use crate::dqcore::{tustin, DiscreteTf};
use crate::plants::{GflParams, SadParams};
use crate::{Result, OMEGA_50HZ};

/// Rotate a dq pair by `angle` (frame at `angle` → reference frame).
#[inline]
pub(crate) fn rot(x: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x.0 - s * x.1, s * x.0 + c * x.1)
}

/// PI with trapezoidal integration.
#[derive(Clone, Debug)]
pub(crate) struct Pi {
    kp: f64,
    ki_half_ts: f64,
    x: f64,
    e_prev: f64,
}

impl Pi {
    pub fn new(kp: f64, ki: f64, ts: f64, x0: f64) -> Self {
        Self {
            kp,
            ki_half_ts: 0.5 * ki * ts,
            x: x0,
            e_prev: 0.0,
        }
    }

    pub fn step(&mut self, e: f64) -> f64 {
        self.x += self.ki_half_ts * (e + self.e_prev);
        self.e_prev = e;
        self.kp * e + self.x
    }
}

/// Synchronous-frame PLL. `delta` is the estimated angle relative to the
/// simulation frame, which itself rotates at ω₀.
///
/// Both the PI and the angle integrator are trapezoidal, so the angle used
/// at a sample depends on that sample's q-axis voltage. The resulting scalar
/// equation is solved by Newton iteration.
#[derive(Clone, Debug)]
pub(crate) struct Pll {
    kp: f64,
    ki: f64,
    ts: f64,
    x: f64,
    e_prev: f64,
    w_prev: f64,
    pub delta: f64,
    pub omega_dev: f64,
}

impl Pll {
    pub fn new(kp: f64, ki: f64, ts: f64, delta0: f64) -> Self {
        Self {
            kp,
            ki,
            ts,
            x: 0.0,
            e_prev: 0.0,
            w_prev: 0.0,
            delta: delta0,
            omega_dev: 0.0,
        }
    }

    /// Angle used for this sample's transforms; advances the estimate.
    pub fn step(&mut self, v: (f64, f64)) -> f64 {
        let h = 0.5 * self.ts;
        let a = self.x + self.ki * h * self.e_prev;
        let b = self.kp + self.ki * h;
        let base = self.delta + h * self.w_prev;
        let mut th = self.delta;
        for _ in 0..4 {
            let (sn, cs) = th.sin_cos();
            let vq = -sn * v.0 + cs * v.1;
            let dvq = -cs * v.0 - sn * v.1;
            let f = th - base - h * (a + b * vq);
            let df = 1.0 - h * b * dvq;
            let step = f / df;
            th -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let vq = rot(v, -th).1;
        self.x += self.ki * h * (vq + self.e_prev);
        self.e_prev = vq;
        self.omega_dev = self.kp * vq + self.x;
        self.w_prev = self.omega_dev;
        self.delta = th;
        th
    }

    pub fn omega(&self) -> f64 {
        OMEGA_50HZ + self.omega_dev
    }
}

/// Direct-form-II-transposed runtime for a [`DiscreteTf`].
#[derive(Clone, Debug)]
pub(crate) struct Filter {
    tf: DiscreteTf,
    state: Vec<f64>,
}

impl Filter {
    pub fn new(tf: DiscreteTf) -> Self {
        let n = tf.a.len().max(tf.b.len());
        Self {
            state: vec![0.0; n.saturating_sub(1)],
            tf,
        }
    }

    pub fn step(&mut self, u: f64) -> f64 {
        let b = |k: usize| self.tf.b.get(k).copied().unwrap_or(0.0);
        let a = |k: usize| self.tf.a.get(k).copied().unwrap_or(0.0);
        let y = b(0) * u + self.state.first().copied().unwrap_or(0.0);
        let n = self.state.len();
        for k in 0..n {
            let next = if k + 1 < n { self.state[k + 1] } else { 0.0 };
            self.state[k] = next + b(k + 1) * u - a(k + 1) * y;
        }
        y
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ramp {
    t0: f64,
    t1: f64,
    from: f64,
    to: f64,
}

impl Ramp {
    fn value(&self, t: f64) -> f64 {
        if t >= self.t1 || self.t1 <= self.t0 {
            self.to
        } else if t <= self.t0 {
            self.from
        } else {
            self.from + (self.to - self.from) * (t - self.t0) / (self.t1 - self.t0)
        }
    }
}

/// Reference that is either constant or following a linear ramp.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Reference {
    value: f64,
    ramp: Option<Ramp>,
}

impl Reference {
    pub fn new(v: f64) -> Self {
        Self {
            value: v,
            ramp: None,
        }
    }

    pub fn set(&mut self, v: f64) {
        self.value = v;
        self.ramp = None;
    }

    pub fn ramp(&mut self, t0: f64, duration: f64, to: f64) {
        let from = self.at(t0);
        self.ramp = Some(Ramp {
            t0,
            t1: t0 + duration,
            from,
            to,
        });
        self.value = to;
    }

    pub fn at(&self, t: f64) -> f64 {
        self.ramp.map_or(self.value, |r| r.value(t))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct GflCtrl {
    pub pll: Pll,
    pi_d: Pi,
    pi_q: Pi,
    pub i_dref: Reference,
    pub i_qref: Reference,
    pub frozen: bool,
    pub v_dc: f64,
}

impl GflCtrl {
    /// Controller preset at the equilibrium with PCC angle `delta0` and
    /// steady modulation voltage `vm0` (PLL frame).
    pub fn new(p: &GflParams, delta0: f64, vm0: (f64, f64), iref: (f64, f64)) -> Self {
        let ts = 1.0 / p.f_s;
        Self {
            pll: Pll::new(p.k_ppll, p.k_ipll, ts, delta0),
            pi_d: Pi::new(p.k_pi, p.k_ii, ts, vm0.0),
            pi_q: Pi::new(p.k_pi, p.k_ii, ts, vm0.1),
            i_dref: Reference::new(iref.0),
            i_qref: Reference::new(iref.1),
            frozen: false,
            v_dc: p.v_dc,
        }
    }

    /// Modulation voltage command in the simulation frame.
    pub fn sample(&mut self, t: f64, v: (f64, f64), i_out: (f64, f64)) -> (f64, f64) {
        let delta = if self.frozen {
            self.pll.delta
        } else {
            self.pll.step(v)
        };
        let ic = rot(i_out, -delta);
        let e = (self.i_dref.at(t) - ic.0, self.i_qref.at(t) - ic.1);
        let u = (self.pi_d.step(e.0), self.pi_q.step(e.1));
        rot(u, delta)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SadCtrl {
    pub pll: Pll,
    pi_d: Pi,
    pi_q: Pi,
    pi_v: Pi,
    filt_d: Filter,
    filt_q: Filter,
    v_offset: (f64, f64),
    h_v: f64,
    lw: f64,
    pub i_qref: Reference,
    pub damping: bool,
    /// Hold the PLL angle and the dc-voltage loop output (used by scans).
    pub frozen: bool,
    i_dref_frozen: f64,
    pub vdc_ref: f64,
}

impl SadCtrl {
    /// Preset at the equilibrium: PCC angle `delta0`, PCC voltage `v0` and
    /// damper current `i0` (both in the PLL frame).
    pub fn new(p: &SadParams, delta0: f64, v0: (f64, f64), i0: (f64, f64)) -> Result<Self> {
        let ts = 1.0 / p.f_s;
        let gf = tustin(&p.damping_filter()?, ts, Some(p.omega_c))?;
        let lw = OMEGA_50HZ * p.l_f;
        // steady converter voltage v − R_f i − ω₀L_f J i
        let u0 = (
            v0.0 - p.r_f * i0.0 + lw * i0.1,
            v0.1 - p.r_f * i0.1 - lw * i0.0,
        );
        Ok(Self {
            pll: Pll::new(p.k_ppll, p.k_ipll, ts, delta0),
            pi_d: Pi::new(p.k_cp, p.k_ci, ts, -(u0.0 - lw * i0.1)),
            pi_q: Pi::new(p.k_cp, p.k_ci, ts, -(u0.1 + lw * i0.0)),
            pi_v: Pi::new(p.k_vp, p.k_vi, ts, i0.0),
            filt_d: Filter::new(gf.clone()),
            filt_q: Filter::new(gf),
            v_offset: v0,
            h_v: p.h_v,
            lw,
            i_qref: Reference::new(i0.1),
            damping: true,
            frozen: false,
            i_dref_frozen: i0.0,
            vdc_ref: p.v_dc,
        })
    }

    /// Take over the damping path of `fresh` (new ω_c, H_v) while keeping
    /// the PLL, current and dc-voltage loop states.
    pub fn retune(&mut self, fresh: &SadCtrl) {
        self.filt_d = fresh.filt_d.clone();
        self.filt_q = fresh.filt_q.clone();
        self.v_offset = fresh.v_offset;
        self.h_v = fresh.h_v;
    }

    /// Converter voltage command in the simulation frame.
    pub fn sample(&mut self, t: f64, v: (f64, f64), i_sad: (f64, f64), vdc: f64) -> (f64, f64) {
        let delta = if self.frozen {
            self.pll.delta
        } else {
            self.pll.step(v)
        };
        let vc = rot(v, -delta);
        let ic = rot(i_sad, -delta);
        // the band-pass path has zero dc gain, so removing the initial
        // operating voltage leaves its output unchanged and avoids a start-up
        // transient
        let vf = (
            self.filt_d.step(vc.0 - self.v_offset.0),
            self.filt_q.step(vc.1 - self.v_offset.1),
        );
        let i_dref = if self.frozen {
            self.i_dref_frozen
        } else {
            let r = self.pi_v.step(self.vdc_ref - vdc);
            self.i_dref_frozen = r;
            r
        };
        let e = (i_dref - ic.0, self.i_qref.at(t) - ic.1);
        let h = if self.damping { self.h_v } else { 0.0 };
        let u = (
            -self.pi_d.step(e.0) - h * vf.0 + self.lw * ic.1,
            -self.pi_q.step(e.1) - h * vf.1 - self.lw * ic.0,
        );
        rot(u, delta)
    }
}
