//! Fully connected networks, parameter storage and optimizers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Gradients, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const CRITIC_LEAK: f64 = 0.2;

/// Uniform Glorot initialization on `[−L, L]` with `L = √(6/(rows+cols))`.
pub fn glorot_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = glorot_limit(rows, cols);
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("glorot shape")
}

pub fn glorot_limit(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Named trainable tensors. Ids are indices into the store.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Registers parameter `id` on the tape as a differentiable leaf.
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, &self.values[id])
    }

    /// Registers parameter `id` as a constant (no gradient).
    pub fn frozen(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.constant(self.values[id].clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalTransform {
    None,
    UnitNormalize,
    /// Output is consumed as four equal column blocks.
    SplitFour,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub batch_norm: bool,
    pub final_transform: FinalTransform,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Domain(format!("invalid layer widths {:?} from input {}", self.widths, self.input)));
        }
        if self.final_transform == FinalTransform::SplitFour && self.widths.last().unwrap() % 4 != 0 {
            return Err(Error::Domain("split-four output width must be a multiple of 4".into()));
        }
        Ok(())
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: ParamId,
    pub b: ParamId,
    pub bn: Option<BnLayer>,
}

/// How batch norm layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Allocates the network's parameters in `store` under `prefix`. Batch
    /// norm, when enabled, is attached to hidden layers only.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut fan_in = spec.input;
        for (i, &width) in spec.widths.iter().enumerate() {
            let w = store.add(format!("{prefix}.{i}.w"), glorot_init(fan_in, width, rng));
            let b = store.add(format!("{prefix}.{i}.b"), Matrix::zeros(1, width));
            let hidden = i + 1 < spec.widths.len();
            let bn = (spec.batch_norm && hidden).then(|| BnLayer {
                gamma: store.add(format!("{prefix}.{i}.gamma"), Matrix::filled(1, width, 1.0)),
                beta: store.add(format!("{prefix}.{i}.beta"), Matrix::zeros(1, width)),
                running_mean: vec![0.0; width],
                running_var: vec![1.0; width],
            });
            layers.push(Layer { w, b, bn });
            fan_in = width;
        }
        Ok(Self { spec, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.push(l.w);
            ids.push(l.b);
            if let Some(bn) = &l.bn {
                ids.push(bn.gamma);
                ids.push(bn.beta);
            }
        }
        ids
    }

    /// Forward pass. With `differentiable` false all parameters enter the tape
    /// as constants. In train mode the per-layer batch statistics are returned
    /// so the caller decides whether to fold them into the running averages.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: BnMode,
        differentiable: bool,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let leaf = |tape: &mut Tape, id| if differentiable { store.var(tape, id) } else { store.frozen(tape, id) };
        let n = self.layers.len();
        let mut stats = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = leaf(tape, layer.w);
            let b = leaf(tape, layer.b);
            h = tape.affine(h, w, b)?;
            if let Some(bn) = &layer.bn {
                let gamma = leaf(tape, bn.gamma);
                let beta = leaf(tape, bn.beta);
                h = match mode {
                    BnMode::Train => {
                        let (y, s) = tape.batch_norm_train(h, gamma, beta, BN_EPS)?;
                        stats.push(s);
                        y
                    }
                    BnMode::Eval => tape.batch_norm_eval(h, gamma, beta, &bn.running_mean, &bn.running_var, BN_EPS)?,
                };
            }
            if i + 1 < n {
                h = match self.spec.hidden_activation {
                    Activation::Identity => h,
                    Activation::Relu => tape.relu(h),
                    Activation::LeakyRelu(a) => tape.leaky_relu(h, a),
                };
            }
        }
        if self.spec.final_transform == FinalTransform::UnitNormalize {
            h = tape.unit_normalize(h);
        }
        Ok((h, stats))
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        let layers = self.layers.iter_mut().filter_map(|l| l.bn.as_mut());
        for (bn, s) in layers.zip(stats) {
            for (r, m) in bn.running_mean.iter_mut().zip(&s.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in bn.running_var.iter_mut().zip(&s.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, beta1: 0.9, beta2: 0.999, rho: 0.9, eps: 1e-8 }
    }

    pub fn rmsprop(lr: f64) -> Self {
        Self { kind: OptimizerKind::RmsProp, lr, beta1: 0.9, beta2: 0.999, rho: 0.9, eps: 1e-8 }
    }
}

/// Optimizer over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub params: Vec<ParamId>,
    pub step: u64,
    /// First moment (Adam) per parameter.
    pub m: BTreeMap<ParamId, Matrix>,
    /// Second moment (Adam) or mean square (RMSprop) per parameter.
    pub v: BTreeMap<ParamId, Matrix>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: Vec<ParamId>, store: &ParamStore) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        let zeros = |id: &ParamId| {
            let (r, c) = store.get(*id).shape();
            (*id, Matrix::zeros(r, c))
        };
        let m = match cfg.kind {
            OptimizerKind::Adam => params.iter().map(zeros).collect(),
            OptimizerKind::RmsProp => BTreeMap::new(),
        };
        let v = params.iter().map(zeros).collect();
        Ok(Self { cfg, params, step: 0, m, v })
    }

    /// Applies one update. Every parameter's gradient is checked for NaN/Inf
    /// before anything is modified.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for &id in &self.params {
            let g = grads.get(id).ok_or_else(|| Error::Numerical(format!("missing gradient for {}", store.name(id))))?;
            if g.shape() != store.get(id).shape() {
                return Err(Error::Shape(format!("gradient shape for {}", store.name(id))));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter {}", store.name(id))));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        for &id in &self.params {
            let g = grads.get(id).unwrap().as_slice();
            let v = self.v.get_mut(&id).unwrap().as_mut_slice();
            let theta = store.get_mut(id).as_mut_slice();
            match c.kind {
                OptimizerKind::Adam => {
                    let m = self.m.get_mut(&id).unwrap().as_mut_slice();
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for i in 0..g.len() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        theta[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
                OptimizerKind::RmsProp => {
                    for i in 0..g.len() {
                        v[i] = c.rho * v[i] + (1.0 - c.rho) * g[i] * g[i];
                        theta[i] -= c.lr * g[i] / (v[i].sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Clamps every entry of the listed parameters to `[lo, hi]`.
pub fn clip_weights(store: &mut ParamStore, ids: &[ParamId], lo: f64, hi: f64) {
    assert!(lo < hi, "clip range must be non-empty");
    for &id in ids {
        for x in store.get_mut(id).as_mut_slice() {
            *x = x.clamp(lo, hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Matrix::filled(1, 1, v));
        (s, id)
    }

    fn grad_of(id: ParamId, g: f64) -> Gradients {
        let mut t = Tape::new();
        let x = t.param(id, &Matrix::filled(1, 1, 0.0));
        let y = t.scale(x, g);
        t.backward(y).unwrap()
    }

    #[test]
    fn glorot_limits() {
        assert!((glorot_limit(2, 3) - 1.2f64.sqrt()).abs() < 1e-15);
        assert!((glorot_limit(1, 1) - 3f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = glorot_init(2, 3, &mut rng);
        assert!(w.as_slice().iter().all(|x| x.abs() <= glorot_limit(2, 3)));
    }

    #[test]
    fn glorot_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = glorot_init(250, 400, &mut rng);
        let n = w.len() as f64;
        let mean = w.as_slice().iter().sum::<f64>() / n;
        let var = w.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 650.0;
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn adam_first_step() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3), vec![id], &s).unwrap();
        opt.apply(&mut s, &grad_of(id, 1.0)).unwrap();
        assert!((s.get(id)[(0, 0)] + 1e-3).abs() < 1e-10);
        let before = s.get(id)[(0, 0)];
        opt.apply(&mut s, &grad_of(id, 1.0)).unwrap();
        assert!(s.get(id)[(0, 0)] < before);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let (mut s, id) = scalar_store(0.5);
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3), vec![id], &s).unwrap();
        opt.apply(&mut s, &grad_of(id, 0.0)).unwrap();
        assert_eq!(s.get(id)[(0, 0)], 0.5);
    }

    #[test]
    fn rmsprop_first_step() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::rmsprop(5e-4), vec![id], &s).unwrap();
        opt.apply(&mut s, &grad_of(id, 1.0)).unwrap();
        let expected = -5e-4 / (0.1f64.sqrt() + 1e-8);
        assert!((s.get(id)[(0, 0)] - expected).abs() < 1e-15);
        assert!((expected + 1.5811e-3).abs() < 1e-7);
    }

    #[test]
    fn rmsprop_updates_shrink_under_constant_gradient() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::rmsprop(5e-4), vec![id], &s).unwrap();
        let mut prev = 0.0;
        let mut last_step = f64::INFINITY;
        for _ in 0..50 {
            opt.apply(&mut s, &grad_of(id, 1.0)).unwrap();
            let cur = s.get(id)[(0, 0)];
            let step = prev - cur;
            assert!(step <= last_step + 1e-18);
            last_step = step;
            prev = cur;
        }
        assert!((last_step - 5e-4).abs() < 1e-5);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3), vec![id], &s).unwrap();
        let err = opt.apply(&mut s, &grad_of(id, f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(s.get(id)[(0, 0)], 0.0);
    }

    #[test]
    fn clipping() {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::from_vec(1, 3, vec![-2.0, 0.5, 3.0]).unwrap());
        clip_weights(&mut s, &[id], -1.0, 1.0);
        assert_eq!(s.get(id).as_slice(), &[-1.0, 0.5, 1.0]);
        let once = s.clone();
        clip_weights(&mut s, &[id], -1.0, 1.0);
        assert_eq!(s, once);
    }

    #[test]
    fn unit_normalized_decoder_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let spec = MlpSpec {
            input: 2,
            widths: vec![8, 5],
            hidden_activation: Activation::Relu,
            batch_norm: true,
            final_transform: FinalTransform::UnitNormalize,
        };
        let mut net = Mlp::new(spec, "dec", &mut store, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(glorot_init(6, 2, &mut rng));
        let (y, stats) = net.forward(&mut t, &store, x, BnMode::Train, true).unwrap();
        net.update_running(&stats);
        let out = t.value(y);
        for r in 0..out.rows() {
            let n = crate::linalg::l2_norm(out.row(r));
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
        }
        assert_ne!(net.layers[0].bn.as_ref().unwrap().running_mean, vec![0.0; 8]);
        assert!(net.layers[1].bn.is_none());
    }
}
