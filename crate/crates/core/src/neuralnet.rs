//! Single-hidden-layer perceptron with tanh hidden units and a logistic
//! output, trained by mini-batch gradient descent on cross entropy.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Hidden-layer sizes tried by default.
pub const DEFAULT_GRID: [usize; 5] = [10, 25, 50, 75, 100];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Sample { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Loss {
    #[default]
    CrossEntropy,
    SumSquares,
}

/// Per-feature affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Standardization {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Sample mean and population std; constant features get std 1.
    pub fn fit(xs: &[&[f64]]) -> Self {
        let d = xs.first().map_or(0, |x| x.len());
        let n = xs.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(*x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in std.iter_mut().zip(*x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Standardization { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub d: usize,
    pub m: usize,
    pub alpha0: Vec<f64>,
    /// Row `j` holds the input weights of hidden unit `j`.
    pub alpha: Vec<f64>,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub standardization: Standardization,
}

#[inline]
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl MlpModel {
    pub fn zeros(d: usize, m: usize) -> Self {
        MlpModel {
            d,
            m,
            alpha0: vec![0.0; m],
            alpha: vec![0.0; m * d],
            beta0: 0.0,
            beta: vec![0.0; m],
            standardization: Standardization::identity(d),
        }
    }

    /// All parameters uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn random(d: usize, m: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        let mut model = MlpModel::zeros(d, m);
        let mut p = model.params();
        p.iter_mut().for_each(|v| *v = rng.gen_range(-b..=b));
        model.set_params(&p);
        model
    }

    pub fn param_count(&self) -> usize {
        self.m * (self.d + 2) + 1
    }

    /// Flat parameter vector: `alpha0, alpha (row-major), beta0, beta`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(&self.alpha0);
        p.extend_from_slice(&self.alpha);
        p.push(self.beta0);
        p.extend_from_slice(&self.beta);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let (m, d) = (self.m, self.d);
        self.alpha0.copy_from_slice(&p[..m]);
        self.alpha.copy_from_slice(&p[m..m + m * d]);
        self.beta0 = p[m + m * d];
        self.beta.copy_from_slice(&p[m + m * d + 1..]);
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.d {
            Ok(())
        } else {
            Err(Error::Dimension(format!("expected {} features, got {}", self.d, x.len())))
        }
    }

    /// Output unit pre-activation `T` and hidden outputs on a standardized input.
    fn activations(&self, z: &[f64], hidden: &mut [f64]) -> f64 {
        let mut t = self.beta0;
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.alpha[j * self.d..(j + 1) * self.d];
            let a = self.alpha0[j] + row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>();
            *h = a.tanh();
            t += self.beta[j] * *h;
        }
        t
    }

    fn output_logit(&self, x: &[f64]) -> f64 {
        let z = self.standardization.apply(x);
        let mut hidden = vec![0.0; self.m];
        self.activations(&z, &mut hidden)
    }

    /// Network output in `(0, 1)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(logistic(self.output_logit(x)))
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    fn check_data(&self, data: &[Sample]) -> Result<()> {
        data.iter().try_for_each(|s| self.check_dim(&s.x))
    }

    /// Summed loss over `data`.
    pub fn loss(&self, data: &[Sample], loss: Loss) -> Result<f64> {
        self.check_data(data)?;
        Ok(data
            .iter()
            .map(|s| {
                let t = self.output_logit(&s.x);
                match loss {
                    Loss::CrossEntropy => softplus(t) - s.y * t,
                    Loss::SumSquares => {
                        let e = s.y - logistic(t);
                        e * e
                    }
                }
            })
            .sum())
    }

    /// Summed loss and its gradient with respect to `params()`, by
    /// backpropagation.
    pub fn gradient(&self, data: &[Sample], loss: Loss) -> Result<(f64, Vec<f64>)> {
        self.check_data(data)?;
        let (m, d) = (self.m, self.d);
        let mut g = vec![0.0; self.param_count()];
        let mut hidden = vec![0.0; m];
        let mut total = 0.0;
        let (o_a, o_b0, o_b) = (m, m + m * d, m + m * d + 1);
        for s in data {
            let z = self.standardization.apply(&s.x);
            let t = self.activations(&z, &mut hidden);
            let f = logistic(t);
            let dt = match loss {
                Loss::CrossEntropy => {
                    total += softplus(t) - s.y * t;
                    f - s.y
                }
                Loss::SumSquares => {
                    let e = s.y - f;
                    total += e * e;
                    -2.0 * e * f * (1.0 - f)
                }
            };
            g[o_b0] += dt;
            for j in 0..m {
                g[o_b + j] += dt * hidden[j];
                let da = dt * self.beta[j] * (1.0 - hidden[j] * hidden[j]);
                g[j] += da;
                let row = &mut g[o_a + j * d..o_a + (j + 1) * d];
                for (gw, v) in row.iter_mut().zip(&z) {
                    *gw += da * v;
                }
            }
        }
        Ok((total, g))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("tomoseg-mlp 1\n");
        writeln!(s, "d {}", self.d).unwrap();
        writeln!(s, "m {}", self.m).unwrap();
        let row = |name: &str, v: &[f64]| {
            let mut line = name.to_string();
            for x in v {
                write!(line, " {x}").unwrap();
            }
            line.push('\n');
            line
        };
        s.push_str(&row("mean", &self.standardization.mean));
        s.push_str(&row("std", &self.standardization.std));
        s.push_str(&row("alpha0", &self.alpha0));
        for j in 0..self.m {
            s.push_str(&row("alpha", &self.alpha[j * self.d..(j + 1) * self.d]));
        }
        s.push_str(&row("beta0", &[self.beta0]));
        s.push_str(&row("beta", &self.beta));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Parse(format!("model: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("tomoseg-mlp 1") {
            return Err(bad("missing or unsupported version line"));
        }
        let mut field = |name: &str| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing {name}")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(name) {
                return Err(bad(&format!("expected {name}")));
            }
            it.map(|t| t.parse::<f64>().map_err(|_| bad(&format!("bad number in {name}"))))
                .collect()
        };
        let d = field("d")?;
        let m = field("m")?;
        if d.len() != 1 || m.len() != 1 || d[0] < 1.0 || m[0] < 1.0 {
            return Err(bad("d and m must be positive integers"));
        }
        let (d, m) = (d[0] as usize, m[0] as usize);
        let mean = field("mean")?;
        let std = field("std")?;
        let alpha0 = field("alpha0")?;
        let mut alpha = Vec::with_capacity(m * d);
        for _ in 0..m {
            let r = field("alpha")?;
            if r.len() != d {
                return Err(bad("alpha row length"));
            }
            alpha.extend(r);
        }
        let beta0 = field("beta0")?;
        let beta = field("beta")?;
        if mean.len() != d || std.len() != d || alpha0.len() != m || beta0.len() != 1 || beta.len() != m {
            return Err(bad("inconsistent lengths"));
        }
        let model = MlpModel {
            d,
            m,
            alpha0,
            alpha,
            beta0: beta0[0],
            beta,
            standardization: Standardization { mean, std },
        };
        if model.params().iter().chain(&model.standardization.mean).chain(&model.standardization.std).any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Summed cross entropy of `model` on `data`.
pub fn cross_entropy(model: &MlpModel, data: &[Sample]) -> Result<f64> {
    model.loss(data, Loss::CrossEntropy)
}

/// Summed squared error of `model` on `data`.
pub fn sum_squared_error(model: &MlpModel, data: &[Sample]) -> Result<f64> {
    model.loss(data, Loss::SumSquares)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_penalty: f64,
    pub validation_fraction: f64,
    pub rng_seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 2000,
            batch_size: 32,
            l2_penalty: 1e-4,
            validation_fraction: 0.2,
            rng_seed: 0,
            loss: Loss::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::InvalidParameter("validation_fraction must be in [0, 0.5]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(Error::InvalidParameter("l2_penalty must be >= 0".into()));
        }
        Ok(())
    }
}

/// Trained model with its best validation loss (mean per sample).
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub validation_loss: f64,
    pub best_epoch: usize,
}

/// Deterministic training/validation split.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64) * validation_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

pub fn train(data: &[Sample], m: usize, cfg: &TrainConfig) -> Result<MlpModel> {
    train_detailed(data, m, cfg).map(|o| o.model)
}

/// Mini-batch gradient descent on the mean batch loss plus
/// `l2_penalty / 2 * |weights|^2` (biases unpenalized). Returns the
/// parameters with the lowest validation loss seen, including the initial
/// ones; without a validation split the training loss is used instead.
pub fn train_detailed(data: &[Sample], m: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if m == 0 {
        return Err(Error::InvalidParameter("hidden units must be >= 1".into()));
    }
    let d = data.first().ok_or_else(|| Error::Training("empty dataset".into()))?.x.len();
    if d == 0 {
        return Err(Error::Training("zero-dimensional features".into()));
    }
    if data.iter().any(|s| s.x.len() != d) {
        return Err(Error::Dimension("inconsistent feature dimension".into()));
    }
    if data.iter().any(|s| s.x.iter().any(|v| !v.is_finite()) || !s.y.is_finite()) {
        return Err(Error::Training("non-finite sample".into()));
    }
    let has_pos = data.iter().any(|s| s.y >= 0.5);
    let has_neg = data.iter().any(|s| s.y < 0.5);
    if !(has_pos && has_neg) {
        return Err(Error::Training("dataset contains a single class".into()));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.validation_fraction, cfg.rng_seed);
    let train_x: Vec<&[f64]> = train_idx.iter().map(|&i| data[i].x.as_slice()).collect();
    let standardization = Standardization::fit(&train_x);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut model = MlpModel::random(d, m, &mut rng);
    model.standardization = standardization;

    let train_set: Vec<Sample> = train_idx.iter().map(|&i| data[i].clone()).collect();
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| data[i].clone()).collect();
    let monitor = if val_set.is_empty() { &train_set } else { &val_set };
    let mean_loss = |mm: &MlpModel| -> Result<f64> { Ok(mm.loss(monitor, cfg.loss)? / monitor.len() as f64) };

    let mut best = model.params();
    let mut best_loss = mean_loss(&model)?;
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut params = model.params();
    let weight_mask: Vec<bool> = {
        let (o_b0, n) = (m + m * d, model.param_count());
        (0..n).map(|k| (m..o_b0).contains(&k) || k > o_b0).collect()
    };
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let (_, g) = model.gradient(&batch, cfg.loss)?;
            let scale = 1.0 / batch.len() as f64;
            for ((p, gk), &w) in params.iter_mut().zip(&g).zip(&weight_mask) {
                let reg = if w { cfg.l2_penalty * *p } else { 0.0 };
                *p -= cfg.learning_rate * (gk * scale + reg);
            }
            model.set_params(&params);
        }
        let l = mean_loss(&model)?;
        if !l.is_finite() {
            return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
        }
        if l < best_loss {
            best_loss = l;
            best = params.clone();
            best_epoch = epoch;
        }
    }
    model.set_params(&best);
    Ok(TrainOutcome {
        model,
        validation_loss: best_loss,
        best_epoch,
    })
}

#[derive(Clone, Debug)]
pub struct GridSearchResult {
    pub best_m: usize,
    pub model: MlpModel,
    /// Validation loss per candidate, in candidate order.
    pub losses: Vec<(usize, f64)>,
}

/// Trains one model per candidate size and keeps the lowest validation
/// loss; ties go to the smaller size.
pub fn grid_search(data: &[Sample], candidates: &[usize], cfg: &TrainConfig) -> Result<GridSearchResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("no hidden-layer candidates".into()));
    }
    let mut best: Option<(usize, f64, MlpModel)> = None;
    let mut losses = Vec::with_capacity(candidates.len());
    for &m in candidates {
        let out = train_detailed(data, m, cfg)?;
        losses.push((m, out.validation_loss));
        let better = match &best {
            None => true,
            Some((bm, bl, _)) => out.validation_loss < *bl || (out.validation_loss == *bl && m < *bm),
        };
        if better {
            best = Some((m, out.validation_loss, out.model));
        }
    }
    let (best_m, _, model) = best.expect("non-empty candidates");
    Ok(GridSearchResult { best_m, model, losses })
}

/// Largest relative deviation between backpropagation and central
/// differences with step `eps`; the denominator is floored at `floor`.
pub fn gradient_check(model: &MlpModel, data: &[Sample], loss: Loss, eps: f64, floor: f64) -> Result<f64> {
    let (_, g) = model.gradient(data, loss)?;
    let p0 = model.params();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for k in 0..p0.len() {
        let mut p = p0.clone();
        p[k] = p0[k] + eps;
        probe.set_params(&p);
        let up = probe.loss(data, loss)?;
        p[k] = p0[k] - eps;
        probe.set_params(&p);
        let down = probe.loss(data, loss)?;
        let num = (up - down) / (2.0 * eps);
        let rel = (g[k] - num).abs() / g[k].abs().max(num.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
