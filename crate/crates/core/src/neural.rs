//! Small fully connected networks: ReLU hidden layers, a linear output
//! layer, z-scored inputs and an affine output map, trained with RMSprop
//! and validation-based early stopping.
//!
//! Batches are stored one example per column.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const FORMAT_TAG: &str = "socfusion-mlp";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// Input, hidden..., output.
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, seed: u64) -> Self {
        let mut layer_sizes = vec![input];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        Self { layer_sizes, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::Contract("a network needs at least one hidden layer".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Contract("layer sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Squared,
    Absolute,
}

impl Loss {
    pub fn value(self, r: f64) -> f64 {
        match self {
            Loss::Squared => r * r,
            Loss::Absolute => r.abs(),
        }
    }

    /// Derivative in the residual; the absolute loss uses 0 at 0.
    pub fn slope(self, r: f64) -> f64 {
        match self {
            Loss::Squared => 2.0 * r,
            Loss::Absolute => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationSplit {
    /// Seeded shuffle, then the last fraction is held out.
    Shuffled,
    /// The last fraction of the sequence is held out.
    Chronological,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub rho: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub split: ValidationSplit,
    /// Epochs without improvement before stopping; `None` never stops early.
    pub patience: Option<usize>,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 100,
            rho: 0.9,
            learning_rate: 1e-3,
            epsilon: 1e-8,
            batch_size: 256,
            validation_fraction: 0.2,
            split: ValidationSplit::Shuffled,
            patience: None,
            loss: Loss::Squared,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Contract(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.rho >= 0.0 && self.rho < 1.0 && self.epsilon > 0.0) {
            return Err(Error::Contract("invalid RMSprop constants".into()));
        }
        Ok(())
    }
}

/// `y = out_mean + out_scale .* f((x - in_mean) ./ in_std)` with `f` the
/// affine/ReLU chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub in_mean: DVector<f64>,
    pub in_std: DVector<f64>,
    pub out_mean: DVector<f64>,
    pub out_scale: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    /// He-initialized weights, zero biases, identity standardization.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sizes = &spec.layer_sizes;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let scale = (2.0 / w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| scale * rng.sample::<f64, _>(StandardNormal)));
            biases.push(DVector::zeros(w[1]));
        }
        let (n_in, n_out) = (sizes[0], sizes[sizes.len() - 1]);
        Ok(Self {
            weights,
            biases,
            in_mean: DVector::zeros(n_in),
            in_std: DVector::from_element(n_in, 1.0),
            out_mean: DVector::zeros(n_out),
            out_scale: DVector::from_element(n_out, 1.0),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].nrows()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.weights.iter().map(|w| w.nrows()));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(Error::Contract("weights and biases must pair up".into()));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(Error::Dimension { expected: w.nrows(), got: b.len() });
            }
            if l > 0 && self.weights[l - 1].nrows() != w.ncols() {
                return Err(Error::Dimension { expected: self.weights[l - 1].nrows(), got: w.ncols() });
            }
        }
        if self.in_mean.len() != self.input_dim() || self.in_std.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: self.in_std.len() });
        }
        if self.out_mean.len() != self.output_dim() || self.out_scale.len() != self.output_dim() {
            return Err(Error::Dimension { expected: self.output_dim(), got: self.out_scale.len() });
        }
        if self.in_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Contract("input std entries must be > 0".into()));
        }
        Ok(())
    }

    /// Sets input standardization from the columns of `x`. Constant
    /// features keep unit scale.
    pub fn fit_input_scaling(&mut self, x: &DMatrix<f64>) {
        let n = x.ncols().max(1) as f64;
        for r in 0..x.nrows() {
            let row = x.row(r);
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            self.in_mean[r] = mean;
            self.in_std[r] = if var.sqrt() > 1e-12 * mean.abs().max(1.0) { var.sqrt() } else { 1.0 };
        }
    }

    fn standardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for mut col in z.column_iter_mut() {
            col -= &self.in_mean;
            col.component_div_assign(&self.in_std);
        }
        z
    }

    fn unscale(&self, mut o: DMatrix<f64>) -> DMatrix<f64> {
        for mut col in o.column_iter_mut() {
            col.component_mul_assign(&self.out_scale);
            col += &self.out_mean;
        }
        o
    }

    /// Pre-activations and activations of every layer.
    fn forward_cache(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = vec![self.standardize(x)];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &acts[l];
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Output for a batch of inputs stored one per column.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: x.nrows() });
        }
        let mut acts = self.forward_cache(x);
        Ok(self.unscale(acts.pop().expect("at least one layer")))
    }

    /// Gradients of `Σ_cols loss` given `dy`, the loss derivative in the
    /// unscaled output, for each column of `x`.
    fn backward(&self, acts: &[DMatrix<f64>], dy: &DMatrix<f64>) -> Gradients {
        let n_layers = self.weights.len();
        let mut delta = dy.clone();
        for mut col in delta.column_iter_mut() {
            col.component_mul_assign(&self.out_scale);
        }
        let mut gw = vec![DMatrix::zeros(0, 0); n_layers];
        let mut gb = vec![DVector::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let mut prev = self.weights[l].transpose() * &delta;
                prev.zip_apply(&acts[l], |d, a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
        Gradients { weights: gw, biases: gb }
    }
}

/// Single-example forward pass.
pub fn mlp_forward(net: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    let y = net.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
    Ok(y.iter().copied().collect())
}

/// Mean loss over the columns of `x` against `targets`, with exact
/// gradients.
pub fn mlp_backward(net: &Mlp, x: &DMatrix<f64>, targets: &DMatrix<f64>, loss: Loss) -> Result<(f64, Gradients)> {
    let obj = Regression { targets: targets.clone(), loss };
    let idx: Vec<usize> = (0..x.ncols()).collect();
    batch_gradient(net, x, &obj, &idx)
}

/// A training criterion defined on network outputs. The loss of a batch is
/// the mean of per-example values.
pub trait Objective {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of per-example losses for examples `idx` (one output column per
    /// example). When `grad` is given it receives the derivative of that sum
    /// in each output.
    fn eval(&self, idx: &[usize], outputs: &DMatrix<f64>, grad: Option<&mut DMatrix<f64>>) -> f64;
}

/// Elementwise loss against fixed targets, summed over outputs.
pub struct Regression {
    pub targets: DMatrix<f64>,
    pub loss: Loss,
}

impl Objective for Regression {
    fn len(&self) -> usize {
        self.targets.ncols()
    }

    fn eval(&self, idx: &[usize], outputs: &DMatrix<f64>, mut grad: Option<&mut DMatrix<f64>>) -> f64 {
        let mut total = 0.0;
        for (c, &k) in idx.iter().enumerate() {
            for r in 0..outputs.nrows() {
                let res = outputs[(r, c)] - self.targets[(r, k)];
                total += self.loss.value(res);
                if let Some(g) = grad.as_deref_mut() {
                    g[(r, c)] = self.loss.slope(res);
                }
            }
        }
        total
    }
}

fn gather(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), idx.len(), |r, c| x[(r, idx[c])])
}

fn batch_gradient(net: &Mlp, x: &DMatrix<f64>, obj: &dyn Objective, idx: &[usize]) -> Result<(f64, Gradients)> {
    if x.nrows() != net.input_dim() {
        return Err(Error::Dimension { expected: net.input_dim(), got: x.nrows() });
    }
    let xb = gather(x, idx);
    let mut acts = net.forward_cache(&xb);
    let out = net.unscale(acts.last().expect("output layer").clone());
    let mut dy = DMatrix::zeros(out.nrows(), out.ncols());
    let total = obj.eval(idx, &out, Some(&mut dy));
    let n = idx.len().max(1) as f64;
    dy /= n;
    acts.pop();
    let g = net.backward(&acts, &dy);
    Ok((total / n, g))
}

fn mean_loss(net: &Mlp, x: &DMatrix<f64>, obj: &dyn Objective, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for chunk in idx.chunks(4096) {
        let out = net.unscale(net.forward_cache(&gather(x, chunk)).pop().expect("output layer"));
        total += obj.eval(chunk, &out, None);
    }
    total / idx.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean training loss per epoch; entry 0 is the initial network.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }
}

fn split_indices(n: usize, train: &TrainSpec) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if train.split == ValidationSplit::Shuffled {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_5e11));
    }
    let n_val = ((n as f64 * train.validation_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Trains `net` in place against an arbitrary objective, with inputs stored
/// one example per column. Input standardization must already be set.
pub fn train_objective(net: &mut Mlp, train: &TrainSpec, x: &DMatrix<f64>, obj: &dyn Objective) -> Result<TrainLog> {
    train.validate()?;
    net.validate()?;
    let n = x.ncols();
    if n < 10 {
        return Err(Error::Contract(format!("training needs >= 10 examples, got {n}")));
    }
    if obj.len() != n {
        return Err(Error::Dimension { expected: n, got: obj.len() });
    }
    if x.nrows() != net.input_dim() {
        return Err(Error::Dimension { expected: net.input_dim(), got: x.nrows() });
    }
    let (mut tr, val) = split_indices(n, train);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut cache_w: Vec<DMatrix<f64>> = net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut cache_b: Vec<DVector<f64>> = net.biases.iter().map(|b| DVector::zeros(b.len())).collect();

    let mut log = TrainLog {
        train_loss: vec![mean_loss(net, x, obj, &tr)],
        val_loss: vec![mean_loss(net, x, obj, &val)],
        best_epoch: 0,
    };
    if !log.val_loss[0].is_finite() {
        return Err(Error::Training { epoch: 0 });
    }
    let mut best = net.clone();
    for epoch in 1..=train.epochs {
        tr.shuffle(&mut rng);
        let mut running = 0.0;
        for batch in tr.chunks(train.batch_size) {
            let (l, g) = batch_gradient(net, x, obj, batch)?;
            if !l.is_finite() {
                return Err(Error::Training { epoch });
            }
            running += l * batch.len() as f64;
            let (rho, lr, eps) = (train.rho, train.learning_rate, train.epsilon);
            for (l, gw) in g.weights.iter().enumerate() {
                cache_w[l].zip_apply(gw, |s, g| *s = rho * *s + (1.0 - rho) * g * g);
                let step = gw.zip_map(&cache_w[l], |g, s| lr * g / (s.sqrt() + eps));
                net.weights[l] -= step;
                cache_b[l].zip_apply(&g.biases[l], |s, g| *s = rho * *s + (1.0 - rho) * g * g);
                let step = g.biases[l].zip_map(&cache_b[l], |g, s| lr * g / (s.sqrt() + eps));
                net.biases[l] -= step;
            }
        }
        let train_loss = running / tr.len() as f64;
        let val_loss = mean_loss(net, x, obj, &val);
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::Training { epoch });
        }
        log.train_loss.push(train_loss);
        log.val_loss.push(val_loss);
        if val_loss < log.val_loss[log.best_epoch] {
            log.best_epoch = epoch;
            best = net.clone();
        } else if train.patience.is_some_and(|p| epoch - log.best_epoch >= p) {
            break;
        }
    }
    *net = best;
    Ok(log)
}

/// Fits a regression network. `inputs` and `targets` hold one example per
/// row. Inputs are z-scored, the output map is set to the target mean and
/// standard deviation, and the output layer starts at zero.
pub fn mlp_train(spec: &MlpSpec, train: &TrainSpec, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(Mlp, TrainLog)> {
    if inputs.len() != targets.len() {
        return Err(Error::Dimension { expected: inputs.len(), got: targets.len() });
    }
    let x = columns(inputs, spec.layer_sizes[0])?;
    let t = columns(targets, *spec.layer_sizes.last().expect("validated"))?;
    let mut net = Mlp::init(spec)?;
    net.fit_input_scaling(&x);
    let n = t.ncols().max(1) as f64;
    for r in 0..t.nrows() {
        let mean = t.row(r).sum() / n;
        let sd = (t.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        net.out_mean[r] = mean;
        net.out_scale[r] = if sd > 1e-12 { sd } else { 1.0 };
    }
    // Start from the mean predictor.
    let last = net.weights.len() - 1;
    net.weights[last].fill(0.0);
    let obj = Regression { targets: t, loss: train.loss };
    let log = train_objective(&mut net, train, &x, &obj)?;
    Ok((net, log))
}

/// Packs row-major examples into a column-per-example matrix.
pub fn columns(rows: &[Vec<f64>], width: usize) -> Result<DMatrix<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::Dimension { expected: width, got: r.len() });
    }
    Ok(DMatrix::from_fn(width, rows.len(), |r, c| rows[c][r]))
}

fn write_vec(out: &mut String, name: &str, v: impl IntoIterator<Item = f64>) {
    out.push_str(name);
    for x in v {
        let _ = write!(out, " {x:e}");
    }
    out.push('\n');
}

impl Mlp {
    pub fn to_text(&self) -> String {
        let mut out = format!("{FORMAT_TAG} {FORMAT_VERSION}\n");
        out.push_str("layers");
        for s in self.layer_sizes() {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
        write_vec(&mut out, "in_mean", self.in_mean.iter().copied());
        write_vec(&mut out, "in_std", self.in_std.iter().copied());
        write_vec(&mut out, "out_mean", self.out_mean.iter().copied());
        write_vec(&mut out, "out_scale", self.out_scale.iter().copied());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            write_vec(&mut out, &format!("w{l}"), w.transpose().iter().copied());
            write_vec(&mut out, &format!("b{l}"), b.iter().copied());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Artifact(format!("network: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{name}`")))?;
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap_or_default();
            if head != name {
                return Err(bad(format!("expected `{name}`, found `{head}`")));
            }
            Ok(parts.map(str::to_owned).collect())
        };
        let header = next(FORMAT_TAG)?;
        if header != [FORMAT_VERSION.to_string()] {
            return Err(bad(format!("unsupported version {header:?}")));
        }
        let sizes: Vec<usize> = next("layers")?
            .iter()
            .map(|s| s.parse().map_err(|_| bad(format!("bad layer size `{s}`"))))
            .collect::<Result<_>>()?;
        if sizes.len() < 2 {
            return Err(bad("need at least two layer sizes".into()));
        }
        let floats = |v: Vec<String>, len: usize, name: &str| -> Result<Vec<f64>> {
            if v.len() != len {
                return Err(bad(format!("`{name}` has {} values, expected {len}", v.len())));
            }
            v.iter().map(|s| s.parse().map_err(|_| bad(format!("bad float `{s}`")))).collect()
        };
        let (n_in, n_out) = (sizes[0], sizes[sizes.len() - 1]);
        let in_mean = DVector::from_vec(floats(next("in_mean")?, n_in, "in_mean")?);
        let in_std = DVector::from_vec(floats(next("in_std")?, n_in, "in_std")?);
        let out_mean = DVector::from_vec(floats(next("out_mean")?, n_out, "out_mean")?);
        let out_scale = DVector::from_vec(floats(next("out_scale")?, n_out, "out_scale")?);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let wname = format!("w{l}");
            let bname = format!("b{l}");
            let wv = floats(next(&wname)?, w[0] * w[1], &wname)?;
            weights.push(DMatrix::from_row_slice(w[1], w[0], &wv));
            biases.push(DVector::from_vec(floats(next(&bname)?, w[1], &bname)?));
        }
        let net = Self { weights, biases, in_mean, in_std, out_mean, out_scale };
        net.validate()?;
        Ok(net)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assume, proptest, ProptestConfig};

    fn random_net(seed: u64, sizes: &[usize]) -> Mlp {
        let mut net = Mlp::init(&MlpSpec { layer_sizes: sizes.to_vec(), seed }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
        for b in &mut net.biases {
            b.apply(|v| *v = rng.random_range(-0.5..0.5));
        }
        for v in net.in_mean.iter_mut().chain(net.out_mean.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in net.in_std.iter_mut().chain(net.out_scale.iter_mut()) {
            *v = rng.random_range(0.5..2.0);
        }
        net
    }

    /// Largest relative gap between backprop and a five-point difference.
    fn max_gradient_error(net: &Mlp, x: &DMatrix<f64>, t: &DMatrix<f64>, loss: Loss) -> f64 {
        let (_, g) = mlp_backward(net, x, t, loss).unwrap();
        let h = 1e-4;
        let numeric = |perturb: &dyn Fn(&mut Mlp, f64)| {
            let at = |d: f64| {
                let mut n = net.clone();
                perturb(&mut n, d);
                mlp_backward(&n, x, t, loss).unwrap().0
            };
            (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
        };
        // Below 1e-4 the difference quotient is mostly rounding noise.
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
        let mut worst: f64 = 0.0;
        for l in 0..net.weights.len() {
            for i in 0..net.weights[l].len() {
                worst = worst.max(rel(g.weights[l][i], numeric(&|n, d| n.weights[l][i] += d)));
            }
            for i in 0..net.biases[l].len() {
                worst = worst.max(rel(g.biases[l][i], numeric(&|n, d| n.biases[l][i] += d)));
            }
        }
        worst
    }

    /// Smallest distance of any hidden pre-activation, or absolute-loss
    /// residual, from its kink.
    fn kink_margin(net: &Mlp, x: &DMatrix<f64>, t: &DMatrix<f64>, loss: Loss) -> f64 {
        let mut a = net.standardize(x);
        let mut margin = f64::INFINITY;
        for l in 0..net.weights.len() - 1 {
            let mut z = &net.weights[l] * &a;
            for mut col in z.column_iter_mut() {
                col += &net.biases[l];
            }
            margin = margin.min(z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
            z.apply(|v| *v = v.max(0.0));
            a = z;
        }
        if loss == Loss::Absolute {
            let r = net.forward_batch(x).unwrap() - t;
            margin = margin.min(r.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
        }
        margin
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = Mlp::init(&MlpSpec::new(3, &[4], 2, 1)).unwrap();
        for w in &mut net.weights {
            w.fill(0.0);
        }
        assert_eq!(mlp_forward(&net, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_returns_standardized_input() {
        let net = Mlp {
            weights: vec![DMatrix::identity(2, 2)],
            biases: vec![DVector::zeros(2)],
            in_mean: DVector::from_vec(vec![1.0, -1.0]),
            in_std: DVector::from_vec(vec![2.0, 4.0]),
            out_mean: DVector::zeros(2),
            out_scale: DVector::from_element(2, 1.0),
        };
        assert_eq!(mlp_forward(&net, &[3.0, 7.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_two_two_one() {
        let net = Mlp {
            weights: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]),
                DMatrix::from_row_slice(1, 2, &[3.0, -2.0]),
            ],
            biases: vec![DVector::from_vec(vec![0.0, -1.0]), DVector::from_vec(vec![0.25])],
            in_mean: DVector::zeros(2),
            in_std: DVector::from_element(2, 1.0),
            out_mean: DVector::zeros(1),
            out_scale: DVector::from_element(1, 1.0),
        };
        // h = relu([1 - 2, 0.5 + 4 - 1]) = [0, 3.5]; y = -7 + 0.25
        assert_eq!(mlp_forward(&net, &[1.0, 2.0]).unwrap(), vec![-6.75]);
        assert!(matches!(mlp_forward(&net, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let net = random_net(3, &[2, 5, 1]);
        let x = DMatrix::from_fn(2, 7, |r, c| (r + 2 * c) as f64 * 0.1);
        let t = net.forward_batch(&x).unwrap();
        let (l, g) = mlp_backward(&net, &x, &t, Loss::Squared).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.weights.iter().all(|w| w.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn squared_gradient_is_linear_in_residual() {
        let net = random_net(4, &[2, 5, 1]);
        let x = DMatrix::from_fn(2, 7, |r, c| ((r + 3 * c) as f64).sin());
        let y = net.forward_batch(&x).unwrap();
        let r = DMatrix::from_fn(1, 7, |_, c| (c as f64).cos());
        let (_, g1) = mlp_backward(&net, &x, &(&y - &r), Loss::Squared).unwrap();
        let (_, g3) = mlp_backward(&net, &x, &(&y - &r * 3.0), Loss::Squared).unwrap();
        for (a, b) in g1.weights.iter().zip(&g3.weights) {
            assert!((a * 3.0 - b).norm() <= 1e-12 * b.norm().max(1.0));
        }
    }

    #[test]
    fn absolute_loss_subgradient_at_zero() {
        assert_eq!(Loss::Absolute.slope(0.0), 0.0);
        assert_eq!(Loss::Absolute.slope(-2.0), -1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig {
            cases: 100,
            rng_seed: proptest::test_runner::RngSeed::Fixed(0x9e37),
            ..ProptestConfig::default()
        })]
        #[test]
        fn backprop_matches_central_differences(seed in any::<u64>(), absolute in any::<bool>()) {
            let net = random_net(seed, &[3, 4, 3, 2]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let x = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-2.0..2.0));
            let t = DMatrix::from_fn(2, 5, |_, _| rng.random_range(-2.0..2.0));
            let loss = if absolute { Loss::Absolute } else { Loss::Squared };
            prop_assume!(kink_margin(&net, &x, &t, loss) > 1e-2);
            let err = max_gradient_error(&net, &x, &t, loss);
            prop_assert!(err <= 1e-5, "relative error {}", err);
        }
    }

    fn linear_data(n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let t = k as f64;
                vec![(0.37 * t).sin() * 3.0, (0.11 * t).cos() + 0.5]
            })
            .collect();
        let targets = inputs.iter().map(|x| vec![2.0 * x[0] - 4.0 * x[1] + 1.0]).collect();
        (inputs, targets)
    }

    #[test]
    fn learns_a_linear_map() {
        let (inputs, targets) = linear_data(2000);
        let spec = MlpSpec::new(2, &[16, 16], 1, 3);
        let train = TrainSpec { epochs: 1000, batch_size: 32, learning_rate: 1e-4, ..TrainSpec::default() };
        let (net, log) = mlp_train(&spec, &train, &inputs, &targets).unwrap();
        let t: Vec<f64> = targets.iter().map(|t| t[0]).collect();
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let sd = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
        let val_rmse = log.best_val_loss().sqrt();
        assert!(val_rmse < 1e-3 * sd, "{val_rmse} vs {sd}");
        let y = mlp_forward(&net, &inputs[5]).unwrap()[0];
        assert!((y - t[5]).abs() < 1e-2);
    }

    #[test]
    fn monotone_tiny_problem_picks_last_epoch() {
        let (inputs, targets) = linear_data(40);
        let spec = MlpSpec::new(2, &[8], 1, 11);
        let train = TrainSpec { epochs: 30, ..TrainSpec::default() };
        let (_, log) = mlp_train(&spec, &train, &inputs, &targets).unwrap();
        assert_eq!(log.best_epoch, 30);
    }

    #[test]
    fn early_stopping_returns_the_best_epoch() {
        let (inputs, targets) = linear_data(300);
        let spec = MlpSpec::new(2, &[8, 8], 1, 5);
        let train = TrainSpec { epochs: 40, learning_rate: 0.05, ..TrainSpec::default() };
        let (net, log) = mlp_train(&spec, &train, &inputs, &targets).unwrap();
        let best = log.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(log.best_val_loss(), best);
        let x = columns(&inputs, 2).unwrap();
        let obj = Regression { targets: columns(&targets, 1).unwrap(), loss: Loss::Squared };
        let (_, val) = split_indices(300, &train);
        assert_eq!(mean_loss(&net, &x, &obj, &val), best);
    }

    #[test]
    fn training_is_deterministic() {
        let (inputs, targets) = linear_data(200);
        let spec = MlpSpec::new(2, &[8], 1, 5);
        let train = TrainSpec { epochs: 5, ..TrainSpec::default() };
        let a = mlp_train(&spec, &train, &inputs, &targets).unwrap();
        let b = mlp_train(&spec, &train, &inputs, &targets).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn divergence_reports_the_epoch() {
        let (inputs, mut targets) = linear_data(50);
        targets[3][0] = 1e300;
        let spec = MlpSpec::new(2, &[4], 1, 5);
        let train = TrainSpec { epochs: 5, split: ValidationSplit::Chronological, ..TrainSpec::default() };
        assert!(matches!(mlp_train(&spec, &train, &inputs, &targets), Err(Error::Training { .. })));
    }

    #[test]
    fn preconditions() {
        let (inputs, targets) = linear_data(5);
        let spec = MlpSpec::new(2, &[4], 1, 5);
        assert!(mlp_train(&spec, &TrainSpec::default(), &inputs, &targets).is_err());
        assert!(MlpSpec { layer_sizes: vec![2, 1], seed: 0 }.validate().is_err());
        let bad = TrainSpec { validation_fraction: 1.0, ..TrainSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let net = random_net(21, &[3, 5, 2]);
        let back = Mlp::from_text(&net.to_text()).unwrap();
        assert_eq!(net, back);
        assert!(Mlp::from_text("socfusion-mlp 9\n").is_err());
    }
}
