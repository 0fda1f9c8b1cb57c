//! One-hidden-layer perceptron with sigmoid hidden units.
//!
//! Inputs and outputs are z-score normalized; training is full-batch
//! gradient descent with momentum and early stopping on the validation set.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &str = "sadamp-mlp";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Rows of (input, target) pairs with a reproducible split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_names: Vec<String>,
    pub target_names: Vec<String>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub split: Vec<Split>,
}

impl Dataset {
    /// Dataset with a 70/15/15 split drawn from `seed`.
    pub fn new(
        input_names: Vec<String>,
        target_names: Vec<String>,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        for (x, y) in inputs.iter().zip(&targets) {
            if x.len() != input_names.len() {
                return Err(Error::LengthMismatch {
                    expected: input_names.len(),
                    got: x.len(),
                });
            }
            if y.len() != target_names.len() {
                return Err(Error::LengthMismatch {
                    expected: target_names.len(),
                    got: y.len(),
                });
            }
            if !x.iter().chain(y).all(|v| v.is_finite()) {
                return Err(Error::param("dataset", "non-finite value"));
            }
        }
        let split = split_assignment(inputs.len(), DEFAULT_SPLIT, seed);
        Ok(Self {
            input_names,
            target_names,
            inputs,
            targets,
            split,
        })
    }

    /// Redraw the split with train and validation fractions; the rest is
    /// the test set.
    pub fn resplit(&mut self, train: f64, val: f64, seed: u64) -> Result<()> {
        if !(train > 0.0 && val >= 0.0 && train + val <= 1.0) {
            return Err(Error::param("split", "need train > 0, val ≥ 0, train + val ≤ 1"));
        }
        self.split = split_assignment(self.len(), (train, val), seed);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn rows(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.split[k] == which).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self
            .input_names
            .iter()
            .chain(&self.target_names)
            .map(String::as_str)
            .collect();
        s.push_str(&names.join(","));
        s.push_str(",split\n");
        for k in 0..self.len() {
            for v in self.inputs[k].iter().chain(&self.targets[k]) {
                let _ = write!(s, "{v:.17e},");
            }
            s.push_str(match self.split[k] {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            });
            s.push('\n');
        }
        s
    }

    /// Parse [`Dataset::to_csv`] output; `n_inputs` leading columns are
    /// inputs, the rest (before `split`) are targets.
    pub fn from_csv(text: &str, n_inputs: usize) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let mut names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        if names.last().map(String::as_str) != Some("split") {
            return Err(Error::Parse {
                line: 1,
                msg: "last column must be `split`".into(),
            });
        }
        names.pop();
        if n_inputs >= names.len() {
            return Err(Error::Parse {
                line: 1,
                msg: "no target columns".into(),
            });
        }
        let target_names = names.split_off(n_inputs);
        let mut ds = Dataset {
            input_names: names,
            target_names,
            inputs: Vec::new(),
            targets: Vec::new(),
            split: Vec::new(),
        };
        let width = ds.input_names.len() + ds.target_names.len();
        for (n, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != width + 1 {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("expected {} fields, found {}", width + 1, fields.len()),
                });
            }
            let vals: Vec<f64> = fields[..width]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: n + 1,
                    msg: e.to_string(),
                })?;
            let split = match fields[width] {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => {
                    return Err(Error::Parse {
                        line: n + 1,
                        msg: format!("unknown split `{other}`"),
                    })
                }
            };
            ds.inputs.push(vals[..n_inputs].to_vec());
            ds.targets.push(vals[n_inputs..].to_vec());
            ds.split.push(split);
        }
        Ok(ds)
    }
}

pub const DEFAULT_SPLIT: (f64, f64) = (0.70, 0.15);

fn split_assignment(n: usize, fractions: (f64, f64), seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = ((fractions.1 * n as f64).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Split::Test; n];
    for (pos, &k) in idx.iter().enumerate() {
        out[k] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hyper {
    pub hidden: usize,
    pub step: f64,
    pub momentum: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Epochs without validation improvement before the step is halved.
    pub plateau: usize,
    pub max_epochs: usize,
    pub max_restarts: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            hidden: 10,
            step: 0.01,
            momentum: 0.9,
            patience: 200,
            plateau: 100,
            max_epochs: 20_000,
            max_restarts: 3,
        }
    }
}

/// Per-feature affine normalization `z = (x − mean)/scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let n = rows.len().max(1) as f64;
        let dim = rows.first().map_or(0, |r| r.len());
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for r in rows {
            for j in 0..dim {
                scale[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Trained network with its normalization and training provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    /// Hidden weights, row-major `n_hidden × n_in`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Output weights, row-major `n_out × n_hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    /// Training range of each input (min, max).
    pub input_range: Vec<(f64, f64)>,
    pub seed: u64,
    pub hyper: Hyper,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MlpModel {
    /// Model with Xavier-uniform weights and zero biases.
    pub fn init(n_in: usize, n_hidden: usize, n_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |fan_in: usize, fan_out: usize| -> Vec<f64> {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect()
        };
        let w1 = fill(n_in, n_hidden);
        let w2 = fill(n_hidden, n_out);
        Self {
            n_in,
            n_hidden,
            n_out,
            w1,
            b1: vec![0.0; n_hidden],
            w2,
            b2: vec![0.0; n_out],
            input_norm: Normalizer::identity(n_in),
            output_norm: Normalizer::identity(n_out),
            input_range: vec![(f64::NEG_INFINITY, f64::INFINITY); n_in],
            seed,
            hyper: Hyper::default(),
        }
    }

    fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn param(&self, k: usize) -> f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        if k < a {
            self.w1[k]
        } else if k < a + b {
            self.b1[k - a]
        } else if k < a + b + c {
            self.w2[k - a - b]
        } else {
            self.b2[k - a - b - c]
        }
    }

    fn param_mut(&mut self, k: usize) -> &mut f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        if k < a {
            &mut self.w1[k]
        } else if k < a + b {
            &mut self.b1[k - a]
        } else if k < a + b + c {
            &mut self.w2[k - a - b]
        } else {
            &mut self.b2[k - a - b - c]
        }
    }

    fn is_finite(&self) -> bool {
        (0..self.n_params()).all(|k| self.param(k).is_finite())
    }

    /// Forward pass on normalized data; fills `hidden`.
    fn forward_norm(&self, z: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        for (h, hv) in hidden.iter_mut().enumerate() {
            let row = &self.w1[h * self.n_in..(h + 1) * self.n_in];
            let s: f64 = row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.b1[h];
            *hv = sigmoid(s);
        }
        for (o, ov) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.n_hidden..(o + 1) * self.n_hidden];
            *ov = row.iter().zip(hidden.iter()).map(|(w, a)| w * a).sum::<f64>() + self.b2[o];
        }
    }

    /// Mean squared error over rows and outputs (normalized scale) and its
    /// gradient with respect to every parameter.
    fn loss_grad(&self, xs: &[Vec<f64>], ys: &[Vec<f64>], grad: Option<&mut [f64]>) -> f64 {
        let n = xs.len();
        if n == 0 {
            return 0.0;
        }
        let norm = 1.0 / (n * self.n_out) as f64;
        let mut hidden = vec![0.0; self.n_hidden];
        let mut out = vec![0.0; self.n_out];
        let mut delta_h = vec![0.0; self.n_hidden];
        let mut loss = 0.0;
        let want_grad = grad.is_some();
        let mut g = vec![0.0; if want_grad { self.n_params() } else { 0 }];
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        for (x, y) in xs.iter().zip(ys) {
            self.forward_norm(x, &mut hidden, &mut out);
            for o in 0..self.n_out {
                let e = out[o] - y[o];
                loss += e * e * norm;
                if want_grad {
                    let d = 2.0 * e * norm;
                    g[a + b + c + o] += d;
                    for h in 0..self.n_hidden {
                        g[a + b + o * self.n_hidden + h] += d * hidden[h];
                    }
                }
            }
            if want_grad {
                for h in 0..self.n_hidden {
                    let mut s = 0.0;
                    for o in 0..self.n_out {
                        let e = out[o] - y[o];
                        s += 2.0 * e * norm * self.w2[o * self.n_hidden + h];
                    }
                    delta_h[h] = s * hidden[h] * (1.0 - hidden[h]);
                    g[a + h] += delta_h[h];
                    for i in 0..self.n_in {
                        g[h * self.n_in + i] += delta_h[h] * x[i];
                    }
                }
            }
        }
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        loss
    }
}

/// Output of [`predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub values: Vec<f64>,
    /// Some input lies outside 1.5× its training range.
    pub extrapolated: bool,
}

pub fn predict(m: &MlpModel, x: &[f64]) -> Result<Prediction> {
    if x.len() != m.n_in {
        return Err(Error::LengthMismatch {
            expected: m.n_in,
            got: x.len(),
        });
    }
    let extrapolated = x.iter().zip(&m.input_range).any(|(v, (lo, hi))| {
        let mid = 0.5 * (lo + hi);
        let half = 0.75 * (hi - lo);
        (v - mid).abs() > half
    });
    let z = m.input_norm.normalize(x);
    let mut hidden = vec![0.0; m.n_hidden];
    let mut out = vec![0.0; m.n_out];
    m.forward_norm(&z, &mut hidden, &mut out);
    Ok(Prediction {
        values: m.output_norm.denormalize(&out),
        extrapolated,
    })
}

/// Coefficient of determination per output column.
pub fn r_squared(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            got: pred.len(),
        });
    }
    if target.len() < 2 {
        return Err(Error::param("target", "need at least two rows"));
    }
    let m = target[0].len();
    let n = target.len() as f64;
    (0..m)
        .map(|j| {
            let mean = target.iter().map(|r| r[j]).sum::<f64>() / n;
            let ss_tot: f64 = target.iter().map(|r| (r[j] - mean).powi(2)).sum();
            let ss_res: f64 = pred
                .iter()
                .zip(target)
                .map(|(p, t)| (p[j] - t[j]).powi(2))
                .sum();
            if ss_tot == 0.0 {
                Err(Error::UndefinedRSquared { output: j })
            } else {
                Ok(1.0 - ss_res / ss_tot)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetrics {
    /// Normalized-scale MSE of the selected model on each split.
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    /// Validation MSE at the last epoch run.
    pub final_val_mse: f64,
    /// Test-set R² per output (train set if the test set is too small).
    pub r2: Vec<f64>,
    pub best_epoch: usize,
    pub epochs: usize,
    pub restarts: usize,
    pub final_step: f64,
}

impl TrainMetrics {
    pub fn to_text(&self, names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "train_mse = {}", self.train_mse);
        let _ = writeln!(s, "val_mse = {}", self.val_mse);
        let _ = writeln!(s, "test_mse = {}", self.test_mse);
        let _ = writeln!(s, "best_epoch = {}", self.best_epoch);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "restarts = {}", self.restarts);
        for (k, r) in self.r2.iter().enumerate() {
            let name = names.get(k).map_or("?", String::as_str);
            let _ = writeln!(s, "r2[{name}] = {r}");
        }
        s
    }
}

/// Train from `starts` initializations (seeds `seed`, `seed + 1`, ...) and
/// keep the one with the lowest validation error.
pub fn train_best_of(
    ds: &Dataset,
    hyper: &Hyper,
    seed: u64,
    starts: usize,
) -> Result<(MlpModel, TrainMetrics)> {
    let mut best: Option<(MlpModel, TrainMetrics)> = None;
    for k in 0..starts.max(1) as u64 {
        let (m, met) = train(ds, hyper, seed.wrapping_add(k))?;
        log::debug!("start {k}: val_mse {:.4e}", met.val_mse);
        if best.as_ref().map_or(true, |b| met.val_mse < b.1.val_mse) {
            best = Some((m, met));
        }
    }
    Ok(best.expect("at least one start"))
}

/// Train a network on `ds` with early stopping on its validation rows.
pub fn train(ds: &Dataset, hyper: &Hyper, seed: u64) -> Result<(MlpModel, TrainMetrics)> {
    if ds.is_empty() {
        return Err(Error::param("dataset", "empty"));
    }
    let tr = ds.rows(Split::Train);
    if tr.is_empty() {
        return Err(Error::param("dataset", "no training rows"));
    }
    let va = {
        let v = ds.rows(Split::Val);
        if v.is_empty() {
            tr.clone()
        } else {
            v
        }
    };
    let te = ds.rows(Split::Test);
    let n_in = ds.input_names.len();
    let n_out = ds.target_names.len();

    let tr_in: Vec<&[f64]> = tr.iter().map(|&k| ds.inputs[k].as_slice()).collect();
    let tr_out: Vec<&[f64]> = tr.iter().map(|&k| ds.targets[k].as_slice()).collect();
    let in_norm = Normalizer::fit(&tr_in);
    let out_norm = Normalizer::fit(&tr_out);
    let mut input_range = vec![(f64::INFINITY, f64::NEG_INFINITY); n_in];
    for x in &tr_in {
        for (r, v) in input_range.iter_mut().zip(x.iter()) {
            r.0 = r.0.min(*v);
            r.1 = r.1.max(*v);
        }
    }
    let prep = |rows: &[usize]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            rows.iter().map(|&k| in_norm.normalize(&ds.inputs[k])).collect(),
            rows.iter().map(|&k| out_norm.normalize(&ds.targets[k])).collect(),
        )
    };
    let (xt, yt) = prep(&tr);
    let (xv, yv) = prep(&va);
    let (xs, ys) = prep(&te);

    let mut step0 = hyper.step;
    for restart in 0..=hyper.max_restarts {
        let mut m = MlpModel::init(n_in, hyper.hidden, n_out, seed);
        m.input_norm = in_norm.clone();
        m.output_norm = out_norm.clone();
        m.input_range = input_range.clone();
        m.hyper = hyper.clone();
        m.hyper.step = step0;
        let np = m.n_params();
        let mut vel = vec![0.0; np];
        let mut g = vec![0.0; np];
        let mut step = step0;
        let mut best = (m.clone(), f64::INFINITY, 0usize);
        let mut since_best = 0;
        let mut since_halve = 0;
        let mut blew_up = false;
        let mut epochs = 0;
        let mut last_val = f64::INFINITY;
        for epoch in 0..hyper.max_epochs {
            let loss = m.loss_grad(&xt, &yt, Some(&mut g));
            if !loss.is_finite() {
                blew_up = true;
                break;
            }
            for k in 0..np {
                vel[k] = hyper.momentum * vel[k] - step * g[k];
                *m.param_mut(k) += vel[k];
            }
            if !m.is_finite() {
                blew_up = true;
                break;
            }
            epochs = epoch + 1;
            let val = m.loss_grad(&xv, &yv, None);
            last_val = val;
            if val < best.1 {
                best = (m.clone(), val, epochs);
                since_best = 0;
                since_halve = 0;
            } else {
                since_best += 1;
                since_halve += 1;
                if since_best >= hyper.patience {
                    break;
                }
                if since_halve >= hyper.plateau {
                    step *= 0.5;
                    since_halve = 0;
                }
            }
        }
        if blew_up {
            log::warn!("training diverged; halving step to {}", step0 * 0.5);
            step0 *= 0.5;
            continue;
        }
        let (model, val_mse, best_epoch) = best;
        let train_mse = model.loss_grad(&xt, &yt, None);
        let test_mse = model.loss_grad(&xs, &ys, None);
        let r2_rows: &[usize] = if te.len() >= 2 { &te } else { &tr };
        let preds: Vec<Vec<f64>> = r2_rows
            .iter()
            .map(|&k| predict(&model, &ds.inputs[k]).map(|p| p.values))
            .collect::<Result<_>>()?;
        let targets: Vec<Vec<f64>> = r2_rows.iter().map(|&k| ds.targets[k].clone()).collect();
        let r2 = r_squared(&preds, &targets).unwrap_or_else(|_| vec![f64::NAN; n_out]);
        return Ok((
            model,
            TrainMetrics {
                train_mse,
                val_mse,
                test_mse,
                final_val_mse: last_val,
                r2,
                best_epoch,
                epochs,
                restarts: restart,
                final_step: step,
            },
        ));
    }
    Err(Error::Training(format!(
        "loss not finite after {} restarts",
        hyper.max_restarts
    )))
}

/// Largest relative deviation between the analytic gradient and central
/// differences with step `h` (normalized scale), over all parameters.
pub fn gradient_check_with_step(m: &MlpModel, x: &[f64], y: &[f64], h: f64) -> Result<f64> {
    if x.len() != m.n_in || y.len() != m.n_out {
        return Err(Error::LengthMismatch {
            expected: m.n_in + m.n_out,
            got: x.len() + y.len(),
        });
    }
    let xs = vec![m.input_norm.normalize(x)];
    let ys = vec![m.output_norm.normalize(y)];
    let mut g = vec![0.0; m.n_params()];
    m.loss_grad(&xs, &ys, Some(&mut g));
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let mut probe = m.clone();
    let mut worst = 0.0f64;
    for (k, gk) in g.iter().enumerate() {
        let p0 = probe.param(k);
        *probe.param_mut(k) = p0 + h;
        let lp = probe.loss_grad(&xs, &ys, None);
        *probe.param_mut(k) = p0 - h;
        let lm = probe.loss_grad(&xs, &ys, None);
        *probe.param_mut(k) = p0;
        let num = (lp - lm) / (2.0 * h);
        worst = worst.max((num - gk).abs() / gk.abs().max(num.abs()).max(scale));
    }
    Ok(worst)
}

pub fn gradient_check(m: &MlpModel, x: &[f64], y: &[f64]) -> Result<f64> {
    gradient_check_with_step(m, x, y, 1e-5)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl MlpModel {
    /// Plain-text model file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let h = &self.hyper;
        let _ = writeln!(
            s,
            "{MODEL_MAGIC} {MODEL_FORMAT_VERSION} layers {} {} {} seed {}",
            self.n_in, self.n_hidden, self.n_out, self.seed
        );
        let _ = writeln!(
            s,
            "hyper step={} momentum={} patience={} plateau={} max_epochs={} max_restarts={}",
            h.step, h.momentum, h.patience, h.plateau, h.max_epochs, h.max_restarts
        );
        let _ = writeln!(s, "input_mean {}", fmt_vec(&self.input_norm.mean));
        let _ = writeln!(s, "input_scale {}", fmt_vec(&self.input_norm.scale));
        let lo: Vec<f64> = self.input_range.iter().map(|r| r.0).collect();
        let hi: Vec<f64> = self.input_range.iter().map(|r| r.1).collect();
        let _ = writeln!(s, "input_min {}", fmt_vec(&lo));
        let _ = writeln!(s, "input_max {}", fmt_vec(&hi));
        let _ = writeln!(s, "output_mean {}", fmt_vec(&self.output_norm.mean));
        let _ = writeln!(s, "output_scale {}", fmt_vec(&self.output_norm.scale));
        let _ = writeln!(s, "layer 1");
        for r in self.w1.chunks(self.n_in) {
            let _ = writeln!(s, "w {}", fmt_vec(r));
        }
        let _ = writeln!(s, "b {}", fmt_vec(&self.b1));
        let _ = writeln!(s, "layer 2");
        for r in self.w2.chunks(self.n_hidden) {
            let _ = writeln!(s, "w {}", fmt_vec(r));
        }
        let _ = writeln!(s, "b {}", fmt_vec(&self.b2));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| (n + 1, l))
            .collect();
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let (l0, head) = *lines.first().ok_or_else(|| perr(1, "empty model file".into()))?;
        let tok: Vec<&str> = head.split_whitespace().collect();
        if tok.len() != 8 || tok[0] != MODEL_MAGIC || tok[2] != "layers" || tok[6] != "seed" {
            return Err(perr(l0, "bad header".into()));
        }
        let version: u32 = tok[1].parse().map_err(|_| perr(l0, "bad version".into()))?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: MODEL_FORMAT_VERSION,
            });
        }
        let num = |s: &str, line: usize| -> Result<usize> {
            s.parse().map_err(|_| perr(line, format!("bad integer `{s}`")))
        };
        let (n_in, n_hidden, n_out) = (num(tok[3], l0)?, num(tok[4], l0)?, num(tok[5], l0)?);
        let seed: u64 = tok[7].parse().map_err(|_| perr(l0, "bad seed".into()))?;
        let mut m = MlpModel::init(n_in, n_hidden, n_out, seed);

        let mut it = lines.iter().skip(1);
        let mut next = |key: &str| -> Result<(usize, Vec<f64>)> {
            let (n, l) = *it.next().ok_or_else(|| perr(0, format!("missing `{key}`")))?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some(key) {
                return Err(perr(n, format!("expected `{key}`")));
            }
            if key == "hyper" || key == "layer" {
                return Ok((n, Vec::new()));
            }
            let v = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(n, e.to_string()))?;
            Ok((n, v))
        };
        let want = |(n, v): (usize, Vec<f64>), len: usize| -> Result<Vec<f64>> {
            if v.len() != len {
                return Err(perr(n, format!("expected {len} values, found {}", v.len())));
            }
            Ok(v)
        };
        let hyper_line = lines
            .get(1)
            .ok_or_else(|| perr(2, "missing hyper line".into()))?;
        next("hyper")?;
        for kv in hyper_line.1.split_whitespace().skip(1) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| perr(hyper_line.0, format!("bad entry `{kv}`")))?;
            let bad = || perr(hyper_line.0, format!("bad value for `{k}`"));
            match k {
                "step" => m.hyper.step = v.parse().map_err(|_| bad())?,
                "momentum" => m.hyper.momentum = v.parse().map_err(|_| bad())?,
                "patience" => m.hyper.patience = v.parse().map_err(|_| bad())?,
                "plateau" => m.hyper.plateau = v.parse().map_err(|_| bad())?,
                "max_epochs" => m.hyper.max_epochs = v.parse().map_err(|_| bad())?,
                "max_restarts" => m.hyper.max_restarts = v.parse().map_err(|_| bad())?,
                _ => return Err(perr(hyper_line.0, format!("unknown key `{k}`"))),
            }
        }
        m.hyper.hidden = n_hidden;
        m.input_norm.mean = want(next("input_mean")?, n_in)?;
        m.input_norm.scale = want(next("input_scale")?, n_in)?;
        let lo = want(next("input_min")?, n_in)?;
        let hi = want(next("input_max")?, n_in)?;
        m.input_range = lo.into_iter().zip(hi).collect();
        m.output_norm.mean = want(next("output_mean")?, n_out)?;
        m.output_norm.scale = want(next("output_scale")?, n_out)?;
        next("layer")?;
        m.w1.clear();
        for _ in 0..n_hidden {
            m.w1.extend(want(next("w")?, n_in)?);
        }
        m.b1 = want(next("b")?, n_hidden)?;
        next("layer")?;
        m.w2.clear();
        for _ in 0..n_out {
            m.w2.extend(want(next("w")?, n_hidden)?);
        }
        m.b2 = want(next("b")?, n_out)?;
        if !m.is_finite() {
            return Err(Error::param("model", "non-finite weights"));
        }
        if m.input_norm.scale.iter().chain(&m.output_norm.scale).any(|s| !(*s > 0.0)) {
            return Err(Error::param("model", "normalization scales must be positive"));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn one_d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize, seed: u64) -> Dataset {
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|k| vec![lo + (hi - lo) * k as f64 / (n - 1) as f64])
            .collect();
        let ys = xs.iter().map(|x| vec![f(x[0])]).collect();
        Dataset::new(vec!["x".into()], vec!["y".into()], xs, ys, seed).unwrap()
    }

    #[test]
    fn split_fractions() {
        let ds = one_d(|x| x, 0.0, 1.0, 201, 3);
        let count = |s| ds.split.iter().filter(|&&v| v == s).count();
        assert!((count(Split::Train) as i64 - 141).abs() <= 1);
        assert!((count(Split::Val) as i64 - 30).abs() <= 1);
        assert!((count(Split::Test) as i64 - 30).abs() <= 1);
        assert_eq!(ds.split, one_d(|x| x, 0.0, 1.0, 201, 3).split);
    }

    #[test]
    fn learns_identity() {
        let ds = one_d(|x| x, -1.0, 1.0, 200, 1);
        let (m, met) = train(&ds, &Hyper::default(), 7).unwrap();
        assert!(met.r2[0] > 0.999, "{:?}", met);
        let p = predict(&m, &[0.3]).unwrap();
        assert!((p.values[0] - 0.3).abs() < 0.01);
        assert!(!p.extrapolated);
        assert!(predict(&m, &[10.0]).unwrap().extrapolated);
        assert!(met.val_mse <= met.final_val_mse);
    }

    #[test]
    fn learns_sine() {
        let ds = one_d(f64::sin, -PI, PI, 500, 2);
        let (_, met) = train(&ds, &Hyper::default(), 11).unwrap();
        assert!(met.r2[0] > 0.99, "{:?}", met);
    }

    #[test]
    fn zero_weights_give_output_mean() {
        let mut m = MlpModel::init(2, 10, 2, 0);
        m.w1.iter_mut().for_each(|w| *w = 0.0);
        m.w2.iter_mut().for_each(|w| *w = 0.0);
        m.output_norm = Normalizer {
            mean: vec![3.0, -1.5],
            scale: vec![2.0, 4.0],
        };
        let p = predict(&m, &[0.4, 9.0]).unwrap();
        assert_eq!(p.values, vec![3.0, -1.5]);
        assert!(predict(&m, &[1.0]).is_err());
    }

    #[test]
    fn r_squared_oracles() {
        let t = vec![vec![1.0], vec![2.0], vec![4.0]];
        assert_eq!(r_squared(&t, &t).unwrap(), vec![1.0]);
        let mean = vec![vec![7.0 / 3.0]; 3];
        assert!(r_squared(&mean, &t).unwrap()[0].abs() < 1e-15);
        let p = vec![vec![1.0], vec![2.0], vec![3.0]];
        let r = r_squared(&p, &t).unwrap()[0];
        assert!((r - (1.0 - 1.0 / (42.0 / 9.0))).abs() < 1e-12);
        assert!((r - 0.786).abs() < 0.001);
        let flat = vec![vec![1.0]; 3];
        assert!(matches!(r_squared(&p, &flat), Err(Error::UndefinedRSquared { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = MlpModel::init(3, 10, 2, 5);
        m.b1.iter_mut().enumerate().for_each(|(k, b)| *b = 0.1 * k as f64 - 0.3);
        let x = [0.2, -0.7, 1.3];
        let y = [0.5, -0.1];
        let d5 = gradient_check(&m, &x, &y).unwrap();
        assert!(d5 < 1e-6, "{d5}");
        let d4 = gradient_check_with_step(&m, &x, &y, 1e-4).unwrap();
        assert!(d4 < 1e-6, "{d4}");
        // the smaller step must not be swamped by cancellation
        assert!(d5 < 10.0 * d4, "{d5} vs {d4}");

        // saturate one hidden unit
        m.w1[0] = 200.0;
        m.b1[0] = 50.0;
        let d = gradient_check(&m, &x, &y).unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn normalizer_round_trip() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|k| vec![k as f64 * 17.3 - 40.0, (k as f64).sqrt() * 1e-3])
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let n = Normalizer::fit(&refs);
        for r in &rows {
            let back = n.denormalize(&n.normalize(r));
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let ds = one_d(|x| x * x, -1.0, 1.0, 60, 4);
        let hyper = Hyper {
            max_epochs: 300,
            ..Hyper::default()
        };
        let (m, _) = train(&ds, &hyper, 9).unwrap();
        let back = MlpModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        for x in [-0.9, 0.0, 0.37] {
            let a = predict(&m, &[x]).unwrap().values[0];
            let b = predict(&back, &[x]).unwrap().values[0];
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let bumped = m.to_text().replacen("sadamp-mlp 1", "sadamp-mlp 9", 1);
        assert!(matches!(MlpModel::from_text(&bumped), Err(Error::Version { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = one_d(f64::cos, 0.0, 3.0, 80, 5);
        let hyper = Hyper {
            max_epochs: 500,
            ..Hyper::default()
        };
        let (a, _) = train(&ds, &hyper, 21).unwrap();
        let (b, _) = train(&ds, &hyper, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let ds = one_d(|x| 3.0 * x, 0.0, 1.0, 10, 6);
        let back = Dataset::from_csv(&ds.to_csv(), 1).unwrap();
        assert_eq!(back, ds);
        assert_relative_eq!(back.targets[9][0], 3.0);
    }
}
