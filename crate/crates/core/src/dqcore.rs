//! Frequency-response algebra: rational transfer functions, 2×2 complex dq
//! matrices, eigenvalue branch tracking and winding numbers.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::{Error, Result};

const J: Complex64 = Complex64::new(0.0, 1.0);

/// `s = j·2π·f`.
#[inline]
pub fn s_of(f_hz: f64) -> Complex64 {
    J * (2.0 * PI * f_hz)
}

/// Real-coefficient rational function of `s`, coefficients in ascending powers.
#[derive(Clone, Debug, PartialEq)]
pub struct RationalTf {
    num: Vec<f64>,
    den: Vec<f64>,
}

impl RationalTf {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if num.is_empty() || den.is_empty() {
            return Err(Error::InvalidTransferFunction(
                "coefficient lists must be nonempty".into(),
            ));
        }
        if num.iter().chain(den.iter()).any(|c| !c.is_finite()) {
            return Err(Error::InvalidTransferFunction(
                "coefficients must be finite".into(),
            ));
        }
        if den.iter().all(|&c| c == 0.0) {
            return Err(Error::InvalidTransferFunction(
                "denominator is the zero polynomial".into(),
            ));
        }
        Ok(Self { num, den })
    }

    pub fn constant(k: f64) -> Self {
        Self {
            num: vec![k],
            den: vec![1.0],
        }
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    /// Evaluate at an arbitrary complex `s`.
    pub fn eval_s(&self, s: Complex64) -> Result<Complex64> {
        let d = horner(&self.den, s);
        let scale = abs_horner(&self.den, s.norm());
        if d.norm() <= f64::EPSILON * scale {
            return Err(Error::PoleAtEvaluation {
                f_hz: s.im / (2.0 * PI),
            });
        }
        Ok(horner(&self.num, s) / d)
    }

    /// Evaluate at `s = j2πf`. Negative `f` gives the conjugate of `+f`.
    pub fn eval(&self, f_hz: f64) -> Result<Complex64> {
        self.eval_s(s_of(f_hz))
    }

    /// Series connection (product).
    pub fn series(&self, other: &RationalTf) -> RationalTf {
        RationalTf {
            num: poly_mul(&self.num, &other.num),
            den: poly_mul(&self.den, &other.den),
        }
    }

    pub fn scaled(&self, k: f64) -> RationalTf {
        RationalTf {
            num: self.num.iter().map(|c| c * k).collect(),
            den: self.den.clone(),
        }
    }
}

fn horner(coeffs: &[f64], s: Complex64) -> Complex64 {
    coeffs
        .iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * s + c)
}

fn abs_horner(coeffs: &[f64], r: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * r + c.abs())
}

pub(crate) fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Discrete-time transfer function in `z⁻¹`, `b[0] + b[1]z⁻¹ + …` over
/// `1 + a[1]z⁻¹ + …` (`a[0]` normalized to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTf {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl DiscreteTf {
    /// Frequency response at `f` for sample period `ts`.
    pub fn eval(&self, f_hz: f64, ts: f64) -> Complex64 {
        let zi = Complex64::from_polar(1.0, -2.0 * PI * f_hz * ts);
        let p = |c: &[f64]| {
            c.iter()
                .rev()
                .fold(Complex64::new(0.0, 0.0), |acc, &x| acc * zi + x)
        };
        p(&self.b) / p(&self.a)
    }
}

/// Bilinear (Tustin) map `s = K(z−1)/(z+1)`, with `K = 2/T` or, when a
/// prewarp frequency `ω_p` is given, `K = ω_p / tan(ω_p T/2)` so the response
/// matches exactly at `ω_p`.
pub fn tustin(tf: &RationalTf, ts: f64, prewarp: Option<f64>) -> Result<DiscreteTf> {
    if !(ts > 0.0) {
        return Err(Error::param("ts", "sample period must be positive"));
    }
    let k = match prewarp {
        Some(w) if w > 0.0 && w * ts < PI => w / (0.5 * w * ts).tan(),
        Some(_) => return Err(Error::param("prewarp", "must lie in (0, π/T)")),
        None => 2.0 / ts,
    };
    let n = tf.num.len().max(tf.den.len()) - 1;
    // coefficients in powers of z⁻¹: (1 − z⁻¹)^k (1 + z⁻¹)^(n−k) K^k
    let map = |coeffs: &[f64]| {
        let mut out = vec![0.0; n + 1];
        for (pow, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let mut p = vec![c * k.powi(pow as i32)];
            for _ in 0..pow {
                p = poly_mul(&p, &[1.0, -1.0]);
            }
            for _ in pow..n {
                p = poly_mul(&p, &[1.0, 1.0]);
            }
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    };
    let mut b = map(&tf.num);
    let mut a = map(&tf.den);
    let a0 = a[0];
    if a0 == 0.0 || !a0.is_finite() {
        return Err(Error::InvalidTransferFunction(
            "bilinear map produced a singular leading coefficient".into(),
        ));
    }
    b.iter_mut().for_each(|x| *x /= a0);
    a.iter_mut().for_each(|x| *x /= a0);
    Ok(DiscreteTf { b, a })
}

/// Second-order Padé approximant of the digital control delay `e^{-sT_d}`.
pub fn pade_delay(t_d: f64) -> Result<RationalTf> {
    if !(t_d > 0.0) || !t_d.is_finite() {
        return Err(Error::param("t_d", "delay must be positive"));
    }
    let a1 = 0.5 * t_d;
    let a2 = t_d * t_d / 12.0;
    RationalTf::new(vec![1.0, -a1, a2], vec![1.0, a1, a2])
}

/// 2×2 complex matrix in the dq frame at one frequency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DqMatrix {
    pub dd: Complex64,
    pub dq: Complex64,
    pub qd: Complex64,
    pub qq: Complex64,
}

impl DqMatrix {
    pub const fn new(dd: Complex64, dq: Complex64, qd: Complex64, qq: Complex64) -> Self {
        Self { dd, dq, qd, qq }
    }

    pub fn from_real(dd: f64, dq: f64, qd: f64, qq: f64) -> Self {
        Self::new(dd.into(), dq.into(), qd.into(), qq.into())
    }

    pub fn zero() -> Self {
        Self::scalar(Complex64::new(0.0, 0.0))
    }

    pub fn identity() -> Self {
        Self::scalar(Complex64::new(1.0, 0.0))
    }

    /// `c·I`.
    pub fn scalar(c: Complex64) -> Self {
        Self::diag(c, c)
    }

    pub fn diag(a: Complex64, b: Complex64) -> Self {
        let z = Complex64::new(0.0, 0.0);
        Self::new(a, z, z, b)
    }

    pub fn trace(&self) -> Complex64 {
        self.dd + self.qq
    }

    pub fn det(&self) -> Complex64 {
        self.dd * self.qq - self.dq * self.qd
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        let scale = self.max_abs();
        if scale == 0.0 || det.norm() <= 1e-14 * scale * scale || !det.is_finite() {
            return None;
        }
        let r = det.inv();
        Some(Self::new(self.qq * r, -self.dq * r, -self.qd * r, self.dd * r))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self::new(self.dd * c, self.dq * c, self.qd * c, self.qq * c)
    }

    pub fn conj(&self) -> Self {
        Self::new(self.dd.conj(), self.dq.conj(), self.qd.conj(), self.qq.conj())
    }

    pub fn entries(&self) -> [Complex64; 4] {
        [self.dd, self.dq, self.qd, self.qq]
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|c| c.is_finite())
    }

    /// Matrix–vector product.
    pub fn apply(&self, v: [Complex64; 2]) -> [Complex64; 2] {
        [
            self.dd * v[0] + self.dq * v[1],
            self.qd * v[0] + self.qq * v[1],
        ]
    }

    /// Eigenvalues from the closed-form roots of `λ² − tr·λ + det = 0`.
    pub fn eig2(&self) -> (Complex64, Complex64) {
        eig2(self)
    }
}

impl Add for DqMatrix {
    type Output = DqMatrix;
    fn add(self, o: DqMatrix) -> DqMatrix {
        DqMatrix::new(self.dd + o.dd, self.dq + o.dq, self.qd + o.qd, self.qq + o.qq)
    }
}

impl Sub for DqMatrix {
    type Output = DqMatrix;
    fn sub(self, o: DqMatrix) -> DqMatrix {
        DqMatrix::new(self.dd - o.dd, self.dq - o.dq, self.qd - o.qd, self.qq - o.qq)
    }
}

impl Mul for DqMatrix {
    type Output = DqMatrix;
    fn mul(self, o: DqMatrix) -> DqMatrix {
        DqMatrix::new(
            self.dd * o.dd + self.dq * o.qd,
            self.dd * o.dq + self.dq * o.qq,
            self.qd * o.dd + self.qq * o.qd,
            self.qd * o.dq + self.qq * o.qq,
        )
    }
}

impl std::iter::Sum for DqMatrix {
    fn sum<I: Iterator<Item = DqMatrix>>(iter: I) -> Self {
        iter.fold(DqMatrix::zero(), |a, b| a + b)
    }
}

/// Closed-form eigenvalues of a 2×2 complex matrix.
///
/// The larger-magnitude root is taken from the half-trace/discriminant form
/// and the other one as `det / λ₁`, which keeps both the sum and the product
/// accurate when the roots differ by orders of magnitude.
pub fn eig2(m: &DqMatrix) -> (Complex64, Complex64) {
    if m.dq == Complex64::new(0.0, 0.0) || m.qd == Complex64::new(0.0, 0.0) {
        return (m.dd, m.qq);
    }
    let half_tr = 0.5 * (m.dd + m.qq);
    let half_diff = 0.5 * (m.dd - m.qq);
    let disc = (half_diff * half_diff + m.dq * m.qd).sqrt();
    let plus = half_tr + disc;
    let minus = half_tr - disc;
    let det = m.det();
    if plus.norm() >= minus.norm() {
        if plus.norm() == 0.0 {
            return (plus, minus);
        }
        (plus, det / plus)
    } else {
        (det / minus, minus)
    }
}

/// Strictly increasing list of positive evaluation frequencies in Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    freqs: Vec<f64>,
}

impl FrequencyGrid {
    pub const MIN_HZ: f64 = 0.01;

    pub fn new(freqs: Vec<f64>) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::InvalidGrid("empty".into()));
        }
        if freqs.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidGrid("non-finite frequency".into()));
        }
        if freqs[0] < Self::MIN_HZ {
            return Err(Error::InvalidGrid(format!(
                "lowest frequency {} Hz below {} Hz",
                freqs[0],
                Self::MIN_HZ
            )));
        }
        if freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("not strictly increasing".into()));
        }
        Ok(Self { freqs })
    }

    /// Logarithmically spaced grid with `n` points, endpoints included.
    pub fn log(min_hz: f64, max_hz: f64, n: usize) -> Result<Self> {
        if n < 2 || !(max_hz > min_hz) || !(min_hz > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "bad log grid [{min_hz}, {max_hz}] with {n} points"
            )));
        }
        let (a, b) = (min_hz.ln(), max_hz.ln());
        let step = (b - a) / (n - 1) as f64;
        let mut freqs: Vec<f64> = (0..n).map(|k| (a + step * k as f64).exp()).collect();
        freqs[0] = min_hz;
        freqs[n - 1] = max_hz;
        Self::new(freqs)
    }

    /// 0.1 Hz to 5 kHz, 2000 logarithmic points.
    pub fn default_analysis() -> Self {
        Self::log(0.1, 5000.0, 2000).expect("static grid")
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.freqs[0]
    }

    pub fn max(&self) -> f64 {
        self.freqs[self.freqs.len() - 1]
    }
}

/// One eigenvalue branch sampled over frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenTrajectory {
    pub freqs: Vec<f64>,
    pub values: Vec<Complex64>,
    pub branch: usize,
}

impl EigenTrajectory {
    /// Positive-frequency half followed by its conjugate mirror in reverse,
    /// i.e. the closed curve for a real-coefficient system whose branch is
    /// real at both ends.
    pub fn mirrored(&self) -> Vec<Complex64> {
        self.values
            .iter()
            .copied()
            .chain(self.values.iter().rev().map(|v| v.conj()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sort per-frequency eigenpairs into two continuous branches.
///
/// Branch 1 starts with the eigenvalue of larger real part at the lowest
/// frequency (ties: larger imaginary part, then input order). At each later
/// sample the pairing is the one with the smaller total distance to the
/// first-order extrapolation of both branches, so branches that cross keep
/// their identity instead of bouncing.
pub fn track_branches(
    freqs: &[f64],
    pairs: &[(Complex64, Complex64)],
) -> Result<(EigenTrajectory, EigenTrajectory)> {
    if pairs.len() < 2 || freqs.len() != pairs.len() {
        return Err(Error::Degenerate(format!(
            "need at least two samples with matching frequencies (got {} pairs, {} freqs)",
            pairs.len(),
            freqs.len()
        )));
    }
    let (a0, b0) = pairs[0];
    let swap0 = b0.re > a0.re || (b0.re == a0.re && b0.im > a0.im);
    let (a0, b0) = if swap0 { (b0, a0) } else { (a0, b0) };
    let mut a = Vec::with_capacity(pairs.len());
    let mut b = Vec::with_capacity(pairs.len());
    a.push(a0);
    b.push(b0);
    for k in 1..pairs.len() {
        let (x, y) = pairs[k];
        let (pa, pb) = if k >= 2 {
            let d0 = freqs[k - 1] - freqs[k - 2];
            let r = if d0 > 0.0 {
                (freqs[k] - freqs[k - 1]) / d0
            } else {
                1.0
            };
            (
                a[k - 1] + (a[k - 1] - a[k - 2]) * r,
                b[k - 1] + (b[k - 1] - b[k - 2]) * r,
            )
        } else {
            (a[k - 1], b[k - 1])
        };
        let keep = (x - pa).norm() + (y - pb).norm();
        let swap = (y - pa).norm() + (x - pb).norm();
        if swap < keep {
            a.push(y);
            b.push(x);
        } else {
            a.push(x);
            b.push(y);
        }
    }
    Ok((
        EigenTrajectory {
            freqs: freqs.to_vec(),
            values: a,
            branch: 1,
        },
        EigenTrajectory {
            freqs: freqs.to_vec(),
            values: b,
            branch: 2,
        },
    ))
}

/// Signed number of counter-clockwise turns of the closed polyline `curve`
/// (last point joined back to the first) around `point`.
pub fn winding_number(curve: &[Complex64], point: Complex64) -> Result<i64> {
    if curve.len() < 2 {
        return Err(Error::Degenerate("curve needs at least two points".into()));
    }
    const ON_CURVE: f64 = 1e-9;
    let mut total = 0.0;
    let n = curve.len();
    for k in 0..n {
        let z0 = curve[k] - point;
        let z1 = curve[(k + 1) % n] - point;
        if z0.norm() < ON_CURVE {
            return Err(Error::OnBoundary { index: k });
        }
        let inc = (z1 / z0).arg();
        if inc.abs() >= PI - 1e-12 {
            return Err(Error::GridTooCoarse {
                index: k,
                increment: inc,
            });
        }
        total += inc;
    }
    Ok((total / (2.0 * PI)).round() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn first_order_lowpass_values() {
        let tf = RationalTf::new(vec![1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(tf.eval(0.0).unwrap(), c(1.0, 0.0));
        let v = tf.eval(1.0 / (2.0 * PI)).unwrap();
        assert_relative_eq!(v.re, 0.5, epsilon = 1e-15);
        assert_relative_eq!(v.im, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn s_over_s_is_identity_off_zero() {
        let tf = RationalTf::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        for f in [0.3, 5.0, 1e4] {
            assert_eq!(tf.eval(f).unwrap(), c(1.0, 0.0));
        }
        assert!(matches!(tf.eval(0.0), Err(Error::PoleAtEvaluation { .. })));
    }

    #[test]
    fn rejects_bad_coefficients() {
        assert!(RationalTf::new(vec![], vec![1.0]).is_err());
        assert!(RationalTf::new(vec![1.0], vec![0.0, 0.0]).is_err());
        assert!(RationalTf::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn pade_unity_at_dc_and_allpass() {
        let g = pade_delay(1.5 / 10_000.0).unwrap();
        assert_eq!(g.eval(0.0).unwrap(), c(1.0, 0.0));
        for f in FrequencyGrid::default_analysis().freqs() {
            assert!((g.eval(*f).unwrap().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pade_phase_matches_taylor_of_exact_delay() {
        // exact delay phase at ω = 100 rad/s, T_d = 1 ms is −0.1 rad
        let g = pade_delay(1e-3).unwrap();
        let v = g.eval(100.0 / (2.0 * PI)).unwrap();
        assert!((v.arg() + 0.1).abs() < 1e-6);
        assert!(pade_delay(0.0).is_err());
    }

    #[test]
    fn tustin_matches_continuous_at_prewarp_and_low_frequency() {
        let tf = RationalTf::new(vec![0.0, 1256.6], vec![1005.31f64.powi(2), 1256.6, 1.0]).unwrap();
        let ts = 1.0 / 20_000.0;
        let d = tustin(&tf, ts, Some(1005.31)).unwrap();
        let fc = 1005.31 / (2.0 * PI);
        assert!((d.eval(fc, ts) - tf.eval(fc).unwrap()).norm() < 1e-12);
        let lp = RationalTf::new(vec![1.0], vec![1.0, 1e-3]).unwrap();
        let d = tustin(&lp, ts, None).unwrap();
        assert!((d.eval(0.0, ts) - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        assert!((d.eval(10.0, ts) - lp.eval(10.0).unwrap()).norm() < 1e-5);
        assert!(tustin(&lp, 0.0, None).is_err());
    }

    #[test]
    fn eig2_known_matrices() {
        let (a, b) = DqMatrix::identity().eig2();
        assert_eq!((a, b), (c(1.0, 0.0), c(1.0, 0.0)));

        // characteristic polynomial λ² − 5λ − 2: roots by the real quadratic formula
        let m = DqMatrix::from_real(1.0, 2.0, 3.0, 4.0);
        let r1 = (5.0 + 33f64.sqrt()) / 2.0;
        let r2 = (5.0 - 33f64.sqrt()) / 2.0;
        let (a, b) = m.eig2();
        assert_relative_eq!(a.re, r1, max_relative = 1e-14);
        assert_relative_eq!(b.re, r2, max_relative = 1e-14);
        assert_relative_eq!(r1, 5.3723, epsilon = 1e-4);
        assert_relative_eq!(r2, -0.3723, epsilon = 1e-4);

        let d = DqMatrix::diag(c(2.0, -1.0), c(-3.0, 0.5));
        let (a, b) = d.eig2();
        assert_eq!((a, b), (c(2.0, -1.0), c(-3.0, 0.5)));
    }

    #[test]
    fn track_constant_pairs() {
        let freqs = [1.0, 2.0, 3.0, 4.0];
        let pairs = vec![(c(-1.0, 2.0), c(3.0, 0.0)); 4];
        let (t1, t2) = track_branches(&freqs, &pairs).unwrap();
        assert!(t1.values.iter().all(|v| *v == c(3.0, 0.0)));
        assert!(t2.values.iter().all(|v| *v == c(-1.0, 2.0)));
        assert_eq!((t1.branch, t2.branch), (1, 2));
    }

    #[test]
    fn track_crossing_lines_follows_continuity() {
        // Two straight lines through 1+1j with different slopes; labels known.
        let n = 401;
        let freqs: Vec<f64> = (0..n).map(|k| 1.0 + k as f64 * 0.01).collect();
        let line_a = |t: f64| c(1.0, 1.0) + c(1.0, 0.3) * (t - 3.0005);
        let line_b = |t: f64| c(1.0, 1.0) + c(-0.8, 0.6) * (t - 3.0005);
        let pairs: Vec<_> = freqs
            .iter()
            .enumerate()
            // shuffle the input order so sorting by position cannot help
            .map(|(k, &t)| {
                if k % 3 == 0 {
                    (line_a(t), line_b(t))
                } else {
                    (line_b(t), line_a(t))
                }
            })
            .collect();
        let (t1, t2) = track_branches(&freqs, &pairs).unwrap();
        // at t = 1 the b line has the larger real part, so branch 1 is line b
        for (k, &t) in freqs.iter().enumerate() {
            assert!((t1.values[k] - line_b(t)).norm() < 1e-12, "k={k}");
            assert!((t2.values[k] - line_a(t)).norm() < 1e-12, "k={k}");
        }
        // per-sample sorting by real part would swap after the crossing
        let last = n - 1;
        assert!(t1.values[last].re < t2.values[last].re);
    }

    #[test]
    fn track_needs_two_samples() {
        assert!(track_branches(&[1.0], &[(c(1.0, 0.0), c(2.0, 0.0))]).is_err());
    }

    fn circle(n: usize, r: f64, center: Complex64) -> Vec<Complex64> {
        (0..n)
            .map(|k| center + Complex64::from_polar(r, 2.0 * PI * k as f64 / n as f64))
            .collect()
    }

    #[test]
    fn winding_unit_circle() {
        let curve = circle(360, 1.0, c(0.0, 0.0));
        assert_eq!(winding_number(&curve, c(0.0, 0.0)).unwrap(), 1);
        assert_eq!(winding_number(&curve, c(3.0, 0.0)).unwrap(), 0);
        let rev: Vec<_> = curve.iter().rev().copied().collect();
        assert_eq!(winding_number(&rev, c(0.0, 0.0)).unwrap(), -1);
    }

    /// Independent count: signed crossings of the ray from `p` along +real.
    fn ray_crossings(curve: &[Complex64], p: Complex64) -> i64 {
        let n = curve.len();
        let mut w = 0;
        for k in 0..n {
            let a = curve[k] - p;
            let b = curve[(k + 1) % n] - p;
            if (a.im <= 0.0) != (b.im <= 0.0) {
                let t = a.im / (a.im - b.im);
                let x = a.re + t * (b.re - a.re);
                if x > 0.0 {
                    w += if b.im > a.im { 1 } else { -1 };
                }
            }
        }
        w
    }

    #[test]
    fn winding_double_loop() {
        // limaçon-type curve e^{2it}(1.5 + cos t) never touches 0 and turns twice
        let n = 2000;
        let curve: Vec<Complex64> = (0..n)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / n as f64;
                Complex64::from_polar(1.5 + t.cos(), 2.0 * t)
            })
            .collect();
        let oracle = ray_crossings(&curve, c(0.0, 0.0));
        assert_eq!(oracle, 2);
        assert_eq!(winding_number(&curve, c(0.0, 0.0)).unwrap(), oracle);
    }

    #[test]
    fn winding_errors() {
        let curve = circle(360, 1.0, c(0.0, 0.0));
        assert!(matches!(
            winding_number(&curve, c(1.0, 0.0)),
            Err(Error::OnBoundary { .. })
        ));
        let coarse = circle(2, 1.0, c(0.0, 0.0));
        assert!(matches!(
            winding_number(&coarse, c(0.0, 0.0)),
            Err(Error::GridTooCoarse { .. })
        ));
    }

    #[test]
    fn frequency_grid_validation() {
        assert!(FrequencyGrid::new(vec![1.0, 1.0]).is_err());
        assert!(FrequencyGrid::new(vec![0.001, 1.0]).is_err());
        let g = FrequencyGrid::default_analysis();
        assert_eq!(g.len(), 2000);
        assert_eq!(g.min(), 0.1);
        assert_eq!(g.max(), 5000.0);
    }

    fn arb_c() -> impl Strategy<Value = Complex64> {
        (-1e3..1e3f64, -1e3..1e3f64).prop_map(|(a, b)| c(a, b))
    }

    fn arb_m() -> impl Strategy<Value = DqMatrix> {
        (arb_c(), arb_c(), arb_c(), arb_c()).prop_map(|(a, b, c_, d)| DqMatrix::new(a, b, c_, d))
    }

    proptest! {
        #[test]
        fn conjugate_symmetry(num in proptest::collection::vec(-10.0..10.0f64, 1..5),
                              den in proptest::collection::vec(0.1..10.0f64, 1..5),
                              f in 0.01..1e4f64) {
            let tf = RationalTf::new(num, den).unwrap();
            let p = tf.eval(f).unwrap();
            let m = tf.eval(-f).unwrap();
            prop_assert_eq!(m, p.conj());
        }

        #[test]
        fn eig2_sum_and_product(m in arb_m()) {
            let (a, b) = m.eig2();
            let scale = a.norm().max(b.norm()).max(1e-300);
            prop_assert!(((a + b) - m.trace()).norm() <= 1e-10 * scale);
            prop_assert!(((a * b) - m.det()).norm() <= 1e-10 * scale * scale);
        }

        #[test]
        fn shift_identity(m in arb_m(), y in arb_c()) {
            let (a, b) = m.eig2();
            let (sa, sb) = (m + DqMatrix::scalar(y)).eig2();
            let keep = (sa - (a + y)).norm() + (sb - (b + y)).norm();
            let swap = (sb - (a + y)).norm() + (sa - (b + y)).norm();
            let scale = 1.0 + a.norm().max(b.norm()) + y.norm();
            // near-defective matrices lose half the digits in any eigen route
            let disc = ((m.dd - m.qq) * (m.dd - m.qq) * 0.25 + m.dq * m.qd).norm().sqrt();
            let tol = if disc > 1e-3 * scale { 1e-10 } else { 1e-6 };
            prop_assert!(keep.min(swap) <= tol * scale);
        }

        #[test]
        fn winding_reverses_sign(r in 0.5..3.0f64, cx in -1.0..1.0f64, cy in -1.0..1.0f64,
                                 px in -4.0..4.0f64, py in -4.0..4.0f64) {
            let curve = circle(720, r, c(cx, cy));
            let p = c(px, py);
            prop_assume!(((p - c(cx, cy)).norm() - r).abs() > 1e-2);
            let rev: Vec<_> = curve.iter().rev().copied().collect();
            let w = winding_number(&curve, p).unwrap();
            prop_assert_eq!(winding_number(&rev, p).unwrap(), -w);
        }
    }
}
