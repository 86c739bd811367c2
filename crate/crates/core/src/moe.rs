//! A minimal, fully inspectable mixture-of-experts model.
//!
//! One-layer models use scalar-output experts and are the setting for the
//! tangent-feature machinery; deeper models stack MoE blocks with residual
//! pass-through (so every layer sees a `d`-dimensional input) and read the
//! prediction out through a linear head.
//!
//! The initial parameter state is snapshotted at construction and never
//! mutated by training; tangent features are always evaluated against it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::scalar::{simplex_tolerance, Real};
use crate::SampleId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// Two-layer affine map with a rectified-linear hidden layer.
    TwoLayerRelu,
    /// Single affine map; makes the model exactly linear in its parameters.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub expert_kind: ExpertKind,
    pub router_frozen: bool,
    pub seed: u64,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.input_dim == 0 || self.num_layers == 0 {
            return Err(Error::InvalidConfig(
                "num_experts, input_dim and num_layers must all be ≥ 1".into(),
            ));
        }
        if matches!(self.expert_kind, ExpertKind::TwoLayerRelu) && self.hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "hidden_dim must be ≥ 1 for two-layer experts".into(),
            ));
        }
        Ok(())
    }

    fn expert_out_dim(&self) -> usize {
        if self.num_layers == 1 {
            1
        } else {
            self.input_dim
        }
    }
}

/// Full routing-weight vector emitted for one (sample, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord<T> {
    pub sample_id: SampleId,
    pub layer: usize,
    pub weights: Vec<T>,
}

impl<T: Real> RoutingRecord<T> {
    pub fn new(sample_id: SampleId, layer: usize, weights: Vec<T>) -> Result<Self> {
        let rec = Self {
            sample_id,
            layer,
            weights,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = simplex_tolerance::<T>(self.weights.len());
        let sum = self.weights.iter().copied().sum::<T>();
        let deviation = (sum - T::one()).abs();
        if deviation > tol || self.weights.iter().any(|w| *w < T::zero() || !w.is_finite()) {
            return Err(Error::SimplexViolation {
                deviation: deviation.as_f64(),
                layer: self.layer,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertParams<T> {
    TwoLayerRelu {
        w1: Array2<T>,
        b1: Array1<T>,
        w2: Array2<T>,
        b2: Array1<T>,
    },
    Linear {
        w: Array2<T>,
        b: Array1<T>,
    },
}

impl<T: Real> ExpertParams<T> {
    fn zeros_like(&self) -> Self {
        match self {
            Self::TwoLayerRelu { w1, b1, w2, b2 } => Self::TwoLayerRelu {
                w1: Array2::zeros(w1.raw_dim()),
                b1: Array1::zeros(b1.raw_dim()),
                w2: Array2::zeros(w2.raw_dim()),
                b2: Array1::zeros(b2.raw_dim()),
            },
            Self::Linear { w, b } => Self::Linear {
                w: Array2::zeros(w.raw_dim()),
                b: Array1::zeros(b.raw_dim()),
            },
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Self::TwoLayerRelu { w1, b1, w2, b2 } => w1.len() + b1.len() + w2.len() + b2.len(),
            Self::Linear { w, b } => w.len() + b.len(),
        }
    }

    fn sq_norm(&self) -> T {
        match self {
            Self::TwoLayerRelu { w1, b1, w2, b2 } => {
                sq(w1.iter()) + sq(b1.iter()) + sq(w2.iter()) + sq(b2.iter())
            }
            Self::Linear { w, b } => sq(w.iter()) + sq(b.iter()),
        }
    }
}

fn sq<'a, T: Real>(iter: impl Iterator<Item = &'a T>) -> T {
    iter.map(|v| *v * *v).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// Router weight matrix, one row per expert.
    pub router: Array2<T>,
    pub experts: Vec<ExpertParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<LayerParams<T>>,
    /// Linear readout (weights, bias); present only in multi-layer mode.
    pub readout: Option<(Array1<T>, T)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Router,
    Expert,
    Other,
}

impl std::fmt::Display for ParamType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamType::Router => write!(f, "router"),
            ParamType::Expert => write!(f, "expert"),
            ParamType::Other => write!(f, "other"),
        }
    }
}

impl std::str::FromStr for ParamType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "router" => Ok(ParamType::Router),
            "expert" => Ok(ParamType::Expert),
            "other" => Ok(ParamType::Other),
            other => Err(Error::InvalidConfig(format!("unknown parameter type '{other}'"))),
        }
    }
}

impl<T: Real> ModelParams<T> {
    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    router: Array2::zeros(l.router.raw_dim()),
                    experts: l.experts.iter().map(ExpertParams::zeros_like).collect(),
                })
                .collect(),
            readout: self
                .readout
                .as_ref()
                .map(|(w, _)| (Array1::zeros(w.raw_dim()), T::zero())),
        }
    }

    /// `self += alpha * other`, entry by entry.
    fn axpy(&mut self, alpha: T, other: &Self) {
        for (l, ol) in self.layers.iter_mut().zip(&other.layers) {
            l.router.zip_mut_with(&ol.router, |a, b| *a += alpha * *b);
            for (e, oe) in l.experts.iter_mut().zip(&ol.experts) {
                match (e, oe) {
                    (
                        ExpertParams::TwoLayerRelu { w1, b1, w2, b2 },
                        ExpertParams::TwoLayerRelu {
                            w1: ow1,
                            b1: ob1,
                            w2: ow2,
                            b2: ob2,
                        },
                    ) => {
                        w1.zip_mut_with(ow1, |a, b| *a += alpha * *b);
                        b1.zip_mut_with(ob1, |a, b| *a += alpha * *b);
                        w2.zip_mut_with(ow2, |a, b| *a += alpha * *b);
                        b2.zip_mut_with(ob2, |a, b| *a += alpha * *b);
                    }
                    (ExpertParams::Linear { w, b }, ExpertParams::Linear { w: ow, b: ob }) => {
                        w.zip_mut_with(ow, |a, b| *a += alpha * *b);
                        b.zip_mut_with(ob, |a, b| *a += alpha * *b);
                    }
                    _ => unreachable!("expert kinds are homogeneous within a model"),
                }
            }
        }
        if let (Some((w, b)), Some((ow, ob))) = (self.readout.as_mut(), other.readout.as_ref()) {
            w.zip_mut_with(ow, |a, c| *a += alpha * *c);
            *b += alpha * *ob;
        }
    }

    /// Accumulate `alpha * (self - reference)` into `grads` for every
    /// parameter, the gradient of a ridge penalty on the parameter change.
    fn add_change_penalty(&self, reference: &Self, alpha: T, grads: &mut Self) {
        let mut delta = self.clone();
        delta.axpy(-T::one(), reference);
        grads.axpy(alpha, &delta);
    }

    fn sq_norm_of_type(&self, ty: ParamType) -> Option<T> {
        match ty {
            ParamType::Router => Some(
                self.layers
                    .iter()
                    .map(|l| sq(l.router.iter()))
                    .sum::<T>(),
            ),
            ParamType::Expert => Some(
                self.layers
                    .iter()
                    .flat_map(|l| l.experts.iter())
                    .map(ExpertParams::sq_norm)
                    .sum::<T>(),
            ),
            ParamType::Other => self
                .readout
                .as_ref()
                .map(|(w, b)| sq(w.iter()) + *b * *b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel<T> {
    config: MoEConfig,
    params: ModelParams<T>,
    initial: ModelParams<T>,
}

pub struct ForwardOutput<T> {
    /// Scalar prediction (expert mixture in one-layer mode, readout otherwise).
    pub prediction: T,
    /// Final hidden state in multi-layer mode.
    pub final_hidden: Option<Array1<T>>,
    pub records: Vec<RoutingRecord<T>>,
}

/// Per-layer activations retained for backpropagation.
struct LayerTrace<T> {
    input: Array1<T>,
    gates: Vec<T>,
    /// Pre-activations of each expert's hidden layer (two-layer experts only).
    expert_pre: Vec<Array1<T>>,
    expert_out: Vec<Array1<T>>,
}

impl<T: Real> MoEModel<T> {
    /// Initialize with parameters drawn standard-normal scaled by 1/√fan-in,
    /// deterministically from `config.seed`. The initial state is retained.
    pub fn init(config: MoEConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let draw = |rng: &mut ChaCha8Rng, fan_in: usize| -> T {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z / (fan_in as f64).sqrt())
        };

        let d = config.input_dim;
        let h = config.hidden_dim;
        let out = config.expert_out_dim();
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let router = Array2::from_shape_fn((config.num_experts, d), |_| draw(&mut rng, d));
            let experts = (0..config.num_experts)
                .map(|_| match config.expert_kind {
                    ExpertKind::TwoLayerRelu => ExpertParams::TwoLayerRelu {
                        w1: Array2::from_shape_fn((h, d), |_| draw(&mut rng, d)),
                        b1: Array1::from_shape_fn(h, |_| draw(&mut rng, d)),
                        w2: Array2::from_shape_fn((out, h), |_| draw(&mut rng, h)),
                        b2: Array1::from_shape_fn(out, |_| draw(&mut rng, h)),
                    },
                    ExpertKind::Linear => ExpertParams::Linear {
                        w: Array2::from_shape_fn((out, d), |_| draw(&mut rng, d)),
                        b: Array1::from_shape_fn(out, |_| draw(&mut rng, d)),
                    },
                })
                .collect();
            layers.push(LayerParams { router, experts });
        }
        let readout = (config.num_layers > 1).then(|| {
            (
                Array1::from_shape_fn(d, |_| draw(&mut rng, d)),
                draw(&mut rng, d),
            )
        });

        let params = ModelParams { layers, readout };
        let initial = params.clone();
        Ok(Self {
            config,
            params,
            initial,
        })
    }

    pub fn config(&self) -> &MoEConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    /// Parameter state snapshotted at initialization; never mutated.
    pub fn initial_params(&self) -> &ModelParams<T> {
        &self.initial
    }

    /// Router rows of layer `layer`: one expert embedding per row.
    pub fn router(&self, layer: usize) -> Result<ArrayView2<'_, T>> {
        self.params
            .layers
            .get(layer)
            .map(|l| l.router.view())
            .ok_or(Error::LayerOutOfRange {
                layer,
                num_layers: self.config.num_layers,
            })
    }

    pub fn forward(&self, sample_id: &SampleId, x: ArrayView1<'_, T>) -> Result<ForwardOutput<T>> {
        let (out, _) = self.forward_traced(sample_id, x, &self.params)?;
        Ok(out)
    }

    /// Routing weights per layer at the initial parameters.
    pub fn gates_at_init(&self, x: ArrayView1<'_, T>) -> Result<Vec<Vec<T>>> {
        let (out, _) = self.forward_traced(&SampleId::new("init"), x, &self.initial)?;
        Ok(out.records.into_iter().map(|r| r.weights).collect())
    }

    fn forward_traced(
        &self,
        sample_id: &SampleId,
        x: ArrayView1<'_, T>,
        params: &ModelParams<T>,
    ) -> Result<(ForwardOutput<T>, Vec<LayerTrace<T>>)> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                actual: x.len(),
                context: "forward input",
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "forward input",
            });
        }

        let multi = self.config.num_layers > 1;
        let mut h = x.to_owned();
        let mut records = Vec::with_capacity(self.config.num_layers);
        let mut traces = Vec::with_capacity(self.config.num_layers);
        let mut mixture = Array1::zeros(self.config.expert_out_dim());

        for (layer_idx, layer) in params.layers.iter().enumerate() {
            let logits = layer.router.dot(&h);
            let gates = softmax(logits.as_slice().expect("contiguous logits"));
            let mut expert_pre = Vec::with_capacity(layer.experts.len());
            let mut expert_out = Vec::with_capacity(layer.experts.len());
            mixture.fill(T::zero());
            for (k, expert) in layer.experts.iter().enumerate() {
                let (pre, out) = expert_forward(expert, &h);
                mixture.zip_mut_with(&out, |m, o| *m += gates[k] * *o);
                expert_pre.push(pre);
                expert_out.push(out);
            }
            records.push(RoutingRecord::new(
                sample_id.clone(),
                layer_idx,
                gates.clone(),
            )?);
            traces.push(LayerTrace {
                input: h.clone(),
                gates,
                expert_pre,
                expert_out,
            });
            if multi {
                h.zip_mut_with(&mixture, |a, m| *a += *m);
            }
        }

        let (prediction, final_hidden) = if multi {
            let (w, b) = params.readout.as_ref().expect("readout in multi-layer mode");
            (w.dot(&h) + *b, Some(h))
        } else {
            (mixture[0], None)
        };
        Ok((
            ForwardOutput {
                prediction,
                final_hidden,
                records,
            },
            traces,
        ))
    }

    /// Accumulate parameter gradients for one sample given dLoss/dPrediction.
    /// Router gradients are skipped when the router is frozen; gradients
    /// still flow *through* the gates to earlier layers.
    fn backward(
        &self,
        traces: &[LayerTrace<T>],
        final_hidden: Option<&Array1<T>>,
        d_pred: T,
        grads: &mut ModelParams<T>,
    ) {
        let multi = self.config.num_layers > 1;
        let train_router = !self.config.router_frozen;

        let mut dh: Array1<T> = if multi {
            let (w, _) = self.params.readout.as_ref().expect("readout");
            let (gw, gb) = grads.readout.as_mut().expect("readout grads");
            let hidden = final_hidden.expect("final hidden in multi-layer mode");
            gw.zip_mut_with(hidden, |g, hv| *g += d_pred * *hv);
            *gb += d_pred;
            w.mapv(|wv| wv * d_pred)
        } else {
            Array1::from_elem(1, d_pred)
        };

        for layer_idx in (0..self.config.num_layers).rev() {
            let trace = &traces[layer_idx];
            let layer = &self.params.layers[layer_idx];
            let glayer = &mut grads.layers[layer_idx];
            let k_experts = layer.experts.len();

            // dm: gradient w.r.t. the gate-weighted mixture. In multi-layer
            // mode the residual path contributes dh directly to the input.
            let dm = dh.clone();
            let mut dinput: Array1<T> = if multi {
                dh
            } else {
                Array1::zeros(trace.input.len())
            };

            let mut dgates = vec![T::zero(); k_experts];
            for k in 0..k_experts {
                dgates[k] = dm.dot(&trace.expert_out[k]);
                let df = dm.mapv(|v| v * trace.gates[k]);
                expert_backward(
                    &layer.experts[k],
                    &mut glayer.experts[k],
                    &trace.input,
                    &trace.expert_pre[k],
                    &df,
                    &mut dinput,
                );
            }

            // Softmax backward: dz_j = g_j (dg_j - Σ_k g_k dg_k).
            let dot = trace
                .gates
                .iter()
                .zip(&dgates)
                .map(|(g, dg)| *g * *dg)
                .sum::<T>();
            let dz: Vec<T> = trace
                .gates
                .iter()
                .zip(&dgates)
                .map(|(g, dg)| *g * (*dg - dot))
                .collect();
            for (j, dzj) in dz.iter().enumerate() {
                if train_router {
                    let mut grow = glayer.router.row_mut(j);
                    grow.zip_mut_with(&trace.input, |g, hv| *g += *dzj * *hv);
                }
                let wrow = layer.router.row(j);
                dinput.zip_mut_with(&wrow, |d, w| *d += *dzj * *w);
            }

            dh = dinput;
        }
    }

    /// Mean squared loss (plus the ridge change-penalty when configured) and
    /// its gradient over the whole set.
    fn loss_and_grads(
        &self,
        set: &LabeledSet<T>,
        ridge_lambda: Option<T>,
    ) -> Result<(T, Vec<T>, ModelParams<T>)> {
        let n = set.len();
        let nf = T::of(n as f64);
        let mut grads = self.params.zeros_like();
        let mut per_sample = Vec::with_capacity(n);
        let mut total = T::zero();
        for i in 0..n {
            let (out, traces) = self.forward_traced(&set.ids[i], set.inputs.row(i), &self.params)?;
            let err = out.prediction - set.targets[i];
            per_sample.push(err * err);
            total += err * err / nf;
            let d_pred = T::of(2.0) * err / nf;
            self.backward(&traces, out.final_hidden.as_ref(), d_pred, &mut grads);
        }
        if let Some(lambda) = ridge_lambda {
            let mut delta = self.params.clone();
            delta.axpy(-T::one(), &self.initial);
            let mut change_sq = T::zero();
            for l in &delta.layers {
                change_sq += sq(l.router.iter());
                for e in &l.experts {
                    change_sq += e.sq_norm();
                }
            }
            if let Some((w, b)) = &delta.readout {
                change_sq += sq(w.iter()) + *b * *b;
            }
            total += lambda * change_sq / nf;
            self.params
                .add_change_penalty(&self.initial, T::of(2.0) * lambda / nf, &mut grads);
        }
        if self.config.router_frozen {
            // The penalty gradient above covers all parameters; a frozen
            // router never moves, so its block is identically zero anyway,
            // but zero it explicitly to keep the contract byte-exact.
            for l in &mut grads.layers {
                l.router.fill(T::zero());
            }
        }
        Ok((total, per_sample, grads))
    }

    /// Per-sample squared losses at the current parameters.
    pub fn eval_losses(&self, set: &LabeledSet<T>) -> Result<Vec<T>> {
        (0..set.len())
            .map(|i| {
                let out = self.forward(&set.ids[i], set.inputs.row(i))?;
                let err = out.prediction - set.targets[i];
                Ok(err * err)
            })
            .collect()
    }

    /// Full-batch gradient descent on the squared loss. The learning rate is
    /// halved whenever the objective increases. Checkpoints (step 0, every
    /// `checkpoint_interval`, and the final step) record per-sample losses
    /// and parameter norms; `observer` runs at each checkpoint.
    pub fn train_with<F>(
        &mut self,
        set: &LabeledSet<T>,
        hyper: &TrainHyper<T>,
        mut observer: F,
    ) -> Result<TrainingTrace<T>>
    where
        F: FnMut(&CheckpointEvent<'_, T>) -> Result<()>,
    {
        if set.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        if hyper.checkpoint_interval == 0 {
            return Err(Error::InvalidConfig("checkpoint_interval must be ≥ 1".into()));
        }
        if let Some(l) = hyper.ridge_lambda {
            if l <= T::zero() {
                return Err(Error::InvalidConfig("ridge lambda must be > 0".into()));
            }
        }

        let mut trace = TrainingTrace {
            steps: Vec::new(),
            sample_ids: set.ids.clone(),
            per_sample_loss: Vec::new(),
            param_norms: Vec::new(),
        };
        let record = |step: u64,
                          model: &Self,
                          trace: &mut TrainingTrace<T>,
                          observer: &mut F|
         -> Result<()> {
            let losses = model.eval_losses(set)?;
            let norms = model.param_norms();
            trace.steps.push(step);
            trace.per_sample_loss.push(losses);
            trace.param_norms.push(norms);
            observer(&CheckpointEvent {
                step,
                model,
                per_sample_loss: trace.per_sample_loss.last().expect("just pushed"),
            })
        };

        record(0, self, &mut trace, &mut observer)?;

        let mut lr = hyper.learning_rate;
        let mut prev_objective = T::infinity();
        for step in 1..=hyper.steps as u64 {
            let (objective, _, grads) = self.loss_and_grads(set, hyper.ridge_lambda)?;
            if !objective.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: objective.as_f64(),
                });
            }
            if objective > prev_objective {
                lr = lr / T::of(2.0);
            }
            prev_objective = objective;
            self.params.axpy(-lr, &grads);

            if step % hyper.checkpoint_interval as u64 == 0 || step == hyper.steps as u64 {
                record(step, self, &mut trace, &mut observer)?;
            }
        }
        trace.validate()?;
        Ok(trace)
    }

    pub fn train(&mut self, set: &LabeledSet<T>, hyper: &TrainHyper<T>) -> Result<TrainingTrace<T>> {
        self.train_with(set, hyper, |_| Ok(()))
    }

    /// Current L2 norm of each parameter type that exists in this model.
    pub fn param_norms(&self) -> Vec<(ParamType, T)> {
        [ParamType::Router, ParamType::Expert, ParamType::Other]
            .into_iter()
            .filter_map(|ty| self.params.sq_norm_of_type(ty).map(|sqn| (ty, sqn.sqrt())))
            .collect()
    }

    /// Tangent feature map at initialization for one-layer scalar models:
    /// the per-expert output gradients, each scaled by its initial gate.
    pub fn ntk_features(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        let gates = self.init_gates_single_layer(x)?;
        let blocks = self.expert_grad_features(x)?;
        let total: usize = blocks.iter().map(Array1::len).sum();
        let mut phi = Array1::zeros(total);
        let mut offset = 0;
        for (g, block) in gates.iter().zip(&blocks) {
            for (j, v) in block.iter().enumerate() {
                phi[offset + j] = *g * *v;
            }
            offset += block.len();
        }
        Ok(phi)
    }

    /// Per-expert gradient blocks ∂f_k/∂φ_k at the initial parameters,
    /// without gate factors. One-layer scalar mode only.
    pub fn expert_grad_features(&self, x: ArrayView1<'_, T>) -> Result<Vec<Array1<T>>> {
        self.require_single_layer()?;
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                actual: x.len(),
                context: "tangent feature input",
            });
        }
        let layer = &self.initial.layers[0];
        let mut blocks = Vec::with_capacity(layer.experts.len());
        for expert in &layer.experts {
            let mut block = Array1::zeros(expert.param_count());
            let mut idx = 0;
            match expert {
                ExpertParams::TwoLayerRelu { w1, b1, w2, .. } => {
                    let pre = w1.dot(&x) + b1;
                    let act = pre.mapv(|v| if v > T::zero() { v } else { T::zero() });
                    let mask = pre.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                    // d f / d w1[i][j] = w2[0][i] · 1[pre_i > 0] · x[j]
                    for i in 0..w1.nrows() {
                        let c = w2[[0, i]] * mask[i];
                        for j in 0..w1.ncols() {
                            block[idx] = c * x[j];
                            idx += 1;
                        }
                    }
                    // d f / d b1[i] = w2[0][i] · 1[pre_i > 0]
                    for i in 0..b1.len() {
                        block[idx] = w2[[0, i]] * mask[i];
                        idx += 1;
                    }
                    // d f / d w2[0][i] = relu(pre_i)
                    for i in 0..act.len() {
                        block[idx] = act[i];
                        idx += 1;
                    }
                    // d f / d b2 = 1
                    block[idx] = T::one();
                }
                ExpertParams::Linear { w, .. } => {
                    for j in 0..w.ncols() {
                        block[idx] = x[j];
                        idx += 1;
                    }
                    block[idx] = T::one();
                }
            }
            blocks.push(block);
        }
        Ok(blocks)
    }

    fn init_gates_single_layer(&self, x: ArrayView1<'_, T>) -> Result<Vec<T>> {
        self.require_single_layer()?;
        let logits = self.initial.layers[0].router.dot(&x);
        Ok(softmax(logits.as_slice().expect("contiguous logits")))
    }

    fn require_single_layer(&self) -> Result<()> {
        if self.config.num_layers != 1 {
            return Err(Error::Unsupported(
                "tangent features are defined for one-layer scalar models only",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
impl<T: Real> MoEModel<T> {
    /// Overwrite one layer's router (current and initial) in tests that need
    /// hand-picked expert embeddings.
    pub(crate) fn set_router_for_test(&mut self, layer: usize, router: Array2<T>) {
        self.initial.layers[layer].router = router.clone();
        self.params.layers[layer].router = router;
    }
}

fn expert_forward<T: Real>(expert: &ExpertParams<T>, input: &Array1<T>) -> (Array1<T>, Array1<T>) {
    match expert {
        ExpertParams::TwoLayerRelu { w1, b1, w2, b2 } => {
            let pre = w1.dot(input) + b1;
            let act = pre.mapv(|v| if v > T::zero() { v } else { T::zero() });
            let out = w2.dot(&act) + b2;
            (pre, out)
        }
        ExpertParams::Linear { w, b } => (Array1::zeros(0), w.dot(input) + b),
    }
}

fn expert_backward<T: Real>(
    expert: &ExpertParams<T>,
    grads: &mut ExpertParams<T>,
    input: &Array1<T>,
    pre: &Array1<T>,
    df: &Array1<T>,
    dinput: &mut Array1<T>,
) {
    match (expert, grads) {
        (
            ExpertParams::TwoLayerRelu { w1, w2, .. },
            ExpertParams::TwoLayerRelu {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
            },
        ) => {
            let act = pre.mapv(|v| if v > T::zero() { v } else { T::zero() });
            // dW2 += df ⊗ act ; db2 += df
            for o in 0..df.len() {
                let d = df[o];
                let mut row = gw2.row_mut(o);
                row.zip_mut_with(&act, |g, a| *g += d * *a);
                gb2[o] += d;
            }
            // da = W2ᵀ df, masked by the ReLU derivative (0 at the kink).
            let mut du = w2.t().dot(df);
            du.zip_mut_with(pre, |d, p| {
                if *p <= T::zero() {
                    *d = T::zero();
                }
            });
            for i in 0..du.len() {
                let d = du[i];
                let mut row = gw1.row_mut(i);
                row.zip_mut_with(input, |g, xv| *g += d * *xv);
                gb1[i] += d;
            }
            dinput.zip_mut_with(&w1.t().dot(&du), |a, b| *a += *b);
        }
        (ExpertParams::Linear { w, .. }, ExpertParams::Linear { w: gw, b: gb }) => {
            for o in 0..df.len() {
                let d = df[o];
                let mut row = gw.row_mut(o);
                row.zip_mut_with(input, |g, xv| *g += d * *xv);
                gb[o] += d;
            }
            dinput.zip_mut_with(&w.t().dot(df), |a, b| *a += *b);
        }
        _ => unreachable!("expert kinds are homogeneous within a model"),
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|z| (*z - max).exp()).collect();
    let sum = exps.iter().copied().sum::<T>();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper<T> {
    pub learning_rate: T,
    pub steps: usize,
    pub ridge_lambda: Option<T>,
    pub checkpoint_interval: usize,
}

impl<T: Real> TrainHyper<T> {
    /// Defaults: learning rate 1e-2, checkpoints every 5% of the run
    /// (at least 10 checkpoints, interval never below 1).
    pub fn for_steps(steps: usize) -> Self {
        Self {
            learning_rate: T::of(1e-2),
            steps,
            ridge_lambda: None,
            checkpoint_interval: (steps / 20).max(1),
        }
    }
}

pub struct CheckpointEvent<'a, T> {
    pub step: u64,
    pub model: &'a MoEModel<T>,
    pub per_sample_loss: &'a [T],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace<T> {
    pub steps: Vec<u64>,
    pub sample_ids: Vec<SampleId>,
    /// `per_sample_loss[c][i]` is sample i's squared loss at checkpoint c.
    pub per_sample_loss: Vec<Vec<T>>,
    /// Parameter L2 norms per checkpoint, grouped by type.
    pub param_norms: Vec<Vec<(ParamType, T)>>,
}

impl<T: Real> TrainingTrace<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.steps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::MalformedSeries(
                "checkpoint steps must be strictly increasing".into(),
            ));
        }
        for losses in &self.per_sample_loss {
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite {
                    context: "recorded per-sample loss",
                });
            }
        }
        Ok(())
    }

    /// Norm trajectory for one parameter type across checkpoints.
    pub fn norm_series(&self, ty: ParamType) -> Vec<T> {
        self.param_norms
            .iter()
            .filter_map(|norms| norms.iter().find(|(t, _)| *t == ty).map(|(_, v)| *v))
            .collect()
    }
}

/// Normalized parameter-change series: per checkpoint transition,
/// `|‖θ‖_{t+1} − ‖θ‖_t|` divided by the mean norm of the whole series.
pub fn snapshot_param_dynamics<T: Real>(
    trace: &TrainingTrace<T>,
) -> Result<Vec<(ParamType, Vec<T>)>> {
    if trace.param_norms.len() < 3 {
        return Err(Error::TooFew {
            needed: 3,
            got: trace.param_norms.len(),
            what: "parameter-norm snapshots",
        });
    }
    let mut out = Vec::new();
    for ty in [ParamType::Router, ParamType::Expert, ParamType::Other] {
        let series = trace.norm_series(ty);
        if series.len() != trace.param_norms.len() {
            continue; // type absent from this model
        }
        let mean = series.iter().copied().sum::<T>() / T::of(series.len() as f64);
        let scale = if mean > T::zero() { mean } else { T::one() };
        let changes = series
            .windows(2)
            .map(|w| (w[1] - w[0]).abs() / scale)
            .collect();
        out.push((ty, changes));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClusterDataConfig, Dataset};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    pub(crate) fn cfg(k: usize, d: usize, layers: usize, seed: u64) -> MoEConfig {
        MoEConfig {
            num_experts: k,
            input_dim: d,
            hidden_dim: 4,
            num_layers: layers,
            expert_kind: ExpertKind::TwoLayerRelu,
            router_frozen: false,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = MoEModel::<f64>::init(cfg(1, 2, 1, 7)).unwrap();
        let b = MoEModel::<f64>::init(cfg(1, 2, 1, 7)).unwrap();
        assert_eq!(a.params(), b.params());
        let c = MoEModel::<f64>::init(cfg(1, 2, 1, 8)).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_shapes_match_config() {
        let m = MoEModel::<f64>::init(cfg(16, 100, 1, 0)).unwrap();
        assert_eq!(m.router(0).unwrap().dim(), (16, 100));
        assert!(m.router(1).is_err());
    }

    #[test]
    fn initial_state_equals_current_after_init() {
        let m = MoEModel::<f64>::init(cfg(3, 5, 2, 1)).unwrap();
        assert_eq!(m.params(), m.initial_params());
    }

    #[test]
    fn zero_dimension_config_rejected() {
        assert!(MoEModel::<f64>::init(cfg(0, 2, 1, 0)).is_err());
        assert!(MoEModel::<f64>::init(cfg(2, 0, 1, 0)).is_err());
        assert!(MoEModel::<f64>::init(cfg(2, 2, 0, 0)).is_err());
    }

    #[test]
    fn single_expert_gate_is_exactly_one() {
        let m = MoEModel::<f64>::init(cfg(1, 3, 1, 2)).unwrap();
        let out = m
            .forward(&SampleId::new("s"), array![0.5, -1.0, 2.0].view())
            .unwrap();
        assert_eq!(out.records[0].weights, vec![1.0]);
    }

    #[test]
    fn gates_lie_on_simplex() {
        let m = MoEModel::<f64>::init(cfg(6, 8, 3, 3)).unwrap();
        let mut rng = crate::testutil::rng(4);
        for _ in 0..20 {
            let x = Array1::from_vec(crate::testutil::random_vec::<f64>(&mut rng, 8));
            let out = m.forward(&SampleId::new("s"), x.view()).unwrap();
            assert_eq!(out.records.len(), 3);
            for rec in &out.records {
                rec.validate().unwrap();
            }
        }
    }

    #[test]
    fn forward_matches_external_mixture() {
        // Recompute Σ g_k f_k outside the forward path.
        let m = MoEModel::<f64>::init(cfg(4, 6, 1, 5)).unwrap();
        let mut rng = crate::testutil::rng(6);
        let x = Array1::from_vec(crate::testutil::random_vec::<f64>(&mut rng, 6));
        let out = m.forward(&SampleId::new("s"), x.view()).unwrap();
        let gates = &out.records[0].weights;
        let layer = &m.params().layers[0];
        let mut expected = 0.0;
        for (k, expert) in layer.experts.iter().enumerate() {
            let ExpertParams::TwoLayerRelu { w1, b1, w2, b2 } = expert else {
                unreachable!()
            };
            let pre = w1.dot(&x) + b1;
            let act = pre.mapv(|v: f64| v.max(0.0));
            expected += gates[k] * (w2.dot(&act) + b2)[0];
        }
        assert_abs_diff_eq!(out.prediction, expected, epsilon = 1e-9);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = MoEModel::<f64>::init(cfg(2, 3, 1, 0)).unwrap();
        assert!(m.forward(&SampleId::new("s"), array![1.0, 2.0].view()).is_err());
        assert!(m
            .forward(&SampleId::new("s"), array![1.0, f64::NAN, 0.0].view())
            .is_err());
    }

    fn tiny_set(n: usize, d: usize, seed: u64) -> LabeledSet<f64> {
        let ds = Dataset::<f64>::generate(&ClusterDataConfig {
            num_clusters: 2,
            dim: d,
            samples_per_cluster: n / 2,
            seed,
            ..ClusterDataConfig::default()
        })
        .unwrap();
        ds.as_labeled()
    }

    #[test]
    fn frozen_router_bytes_unchanged_by_training() {
        let mut config = cfg(4, 6, 2, 9);
        config.router_frozen = true;
        let mut m = MoEModel::<f64>::init(config).unwrap();
        let before: Vec<Array2<f64>> = m.params().layers.iter().map(|l| l.router.clone()).collect();
        let set = tiny_set(8, 6, 3);
        m.train(&set, &TrainHyper::for_steps(50)).unwrap();
        for (a, l) in before.iter().zip(&m.params().layers) {
            assert_eq!(a, &l.router, "frozen router must be bit-identical");
        }
        assert_ne!(m.params(), m.initial_params(), "experts must have moved");
    }

    #[test]
    fn single_sample_loss_decreases() {
        let mut m = MoEModel::<f64>::init(cfg(2, 4, 1, 11)).unwrap();
        let set = LabeledSet {
            ids: vec![SampleId::new("only")],
            inputs: Array2::from_shape_vec((1, 4), vec![0.3, -0.2, 0.9, 0.1]).unwrap(),
            targets: vec![0.7],
        };
        let trace = m.train(&set, &TrainHyper::for_steps(200)).unwrap();
        let first = trace.per_sample_loss.first().unwrap()[0];
        let last = trace.per_sample_loss.last().unwrap()[0];
        assert!(last < first, "loss should fall: {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let set = tiny_set(8, 5, 12);
        let run = || {
            let mut m = MoEModel::<f64>::init(cfg(3, 5, 2, 21)).unwrap();
            m.train(&set, &TrainHyper::for_steps(60)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        // Central differences over every parameter of a small model,
        // including the router path and the readout.
        let set = tiny_set(6, 4, 31);
        let m = MoEModel::<f64>::init(cfg(3, 4, 2, 41)).unwrap();
        let (_, _, grads) = m.loss_and_grads(&set, None).unwrap();
        let eps = 1e-5;

        let loss_of = |model: &MoEModel<f64>| -> f64 {
            model
                .eval_losses(&set)
                .unwrap()
                .iter()
                .sum::<f64>()
                / set.len() as f64
        };

        let mut checked = 0usize;
        let mut check = |analytic: f64, mut bump: Box<dyn FnMut(&mut MoEModel<f64>, f64)>| {
            let mut plus = m.clone();
            bump(&mut plus, eps);
            let mut minus = m.clone();
            bump(&mut minus, -eps);
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / scale < 1e-4,
                "gradient mismatch: analytic {analytic}, numeric {numeric}"
            );
            checked += 1;
        };

        for (li, layer) in grads.layers.iter().enumerate() {
            check(
                layer.router[[0, 1]],
                Box::new(move |m, e| m.params.layers[li].router[[0, 1]] += e),
            );
            let ExpertParams::TwoLayerRelu { w1, b1, w2, b2 } = &layer.experts[1] else {
                unreachable!()
            };
            check(
                w1[[2, 0]],
                Box::new(move |m, e| {
                    let ExpertParams::TwoLayerRelu { w1, .. } = &mut m.params.layers[li].experts[1]
                    else {
                        unreachable!()
                    };
                    w1[[2, 0]] += e;
                }),
            );
            check(
                b1[1],
                Box::new(move |m, e| {
                    let ExpertParams::TwoLayerRelu { b1, .. } = &mut m.params.layers[li].experts[1]
                    else {
                        unreachable!()
                    };
                    b1[1] += e;
                }),
            );
            check(
                w2[[0, 3]],
                Box::new(move |m, e| {
                    let ExpertParams::TwoLayerRelu { w2, .. } = &mut m.params.layers[li].experts[1]
                    else {
                        unreachable!()
                    };
                    w2[[0, 3]] += e;
                }),
            );
            check(
                b2[0],
                Box::new(move |m, e| {
                    let ExpertParams::TwoLayerRelu { b2, .. } = &mut m.params.layers[li].experts[1]
                    else {
                        unreachable!()
                    };
                    b2[0] += e;
                }),
            );
        }
        let (gw, gb) = grads.readout.as_ref().unwrap();
        check(
            gw[2],
            Box::new(|m, e| m.params.readout.as_mut().unwrap().0[2] += e),
        );
        check(*gb, Box::new(|m, e| m.params.readout.as_mut().unwrap().1 += e));
        assert!(checked >= 12);
    }

    #[test]
    fn ntk_features_single_expert_is_plain_gradient() {
        let m = MoEModel::<f64>::init(cfg(1, 3, 1, 51)).unwrap();
        let x = array![0.4, -0.9, 1.3];
        let phi = m.ntk_features(x.view()).unwrap();
        let block = &m.expert_grad_features(x.view()).unwrap()[0];
        assert_eq!(phi.len(), block.len());
        for (a, b) in phi.iter().zip(block.iter()) {
            assert_eq!(a, b, "g ≡ 1 must leave the gradient untouched");
        }
    }

    #[test]
    fn ntk_features_zero_gate_gives_zero_block() {
        // Router rows chosen so the second logit underflows to exp(-2000)=0.
        let mut m = MoEModel::<f64>::init(cfg(2, 1, 1, 61)).unwrap();
        m.initial.layers[0].router = array![[0.0], [-2000.0]];
        m.params.layers[0].router = m.initial.layers[0].router.clone();
        let x = array![1.0];
        let gates = m.init_gates_single_layer(x.view()).unwrap();
        assert_eq!(gates, vec![1.0, 0.0]);
        let phi = m.ntk_features(x.view()).unwrap();
        let block_len = m.expert_grad_features(x.view()).unwrap()[0].len();
        assert!(phi.slice(ndarray::s![block_len..]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ntk_feature_gradients_match_finite_differences() {
        // ⟨Φ(x), Φ(x')⟩ against central-difference expert gradients.
        let m = MoEModel::<f64>::init(cfg(3, 4, 1, 71)).unwrap();
        let mut rng = crate::testutil::rng(8);
        let x = Array1::from_vec(crate::testutil::random_vec::<f64>(&mut rng, 4));
        let blocks = m.expert_grad_features(x.view()).unwrap();

        let layer = &m.initial.layers[0];
        for (k, expert) in layer.experts.iter().enumerate() {
            let ExpertParams::TwoLayerRelu { w1, b1, w2, b2 } = expert else {
                unreachable!()
            };
            let f = |w1: &Array2<f64>, b1: &Array1<f64>, w2: &Array2<f64>, b2: &Array1<f64>| {
                let pre = w1.dot(&x) + b1;
                let act = pre.mapv(|v: f64| v.max(0.0));
                (w2.dot(&act) + b2)[0]
            };
            let eps = 1e-5;
            // Spot-check one coordinate of each tensor via central differences.
            let mut w1p = w1.clone();
            w1p[[1, 2]] += eps;
            let mut w1m = w1.clone();
            w1m[[1, 2]] -= eps;
            let fd = (f(&w1p, b1, w2, b2) - f(&w1m, b1, w2, b2)) / (2.0 * eps);
            let idx = w1.ncols() + 2; // row 1, col 2 in row-major layout
            assert_abs_diff_eq!(blocks[k][idx], fd, epsilon = 1e-4);

            let mut b2p = b2.clone();
            b2p[0] += eps;
            let mut b2m = b2.clone();
            b2m[0] -= eps;
            let fd = (f(w1, b1, w2, &b2p) - f(w1, b1, w2, &b2m)) / (2.0 * eps);
            assert_abs_diff_eq!(*blocks[k].last().unwrap(), fd, epsilon = 1e-4);
        }
    }

    #[test]
    fn ntk_features_reject_multi_layer() {
        let m = MoEModel::<f64>::init(cfg(2, 3, 2, 81)).unwrap();
        assert!(matches!(
            m.ntk_features(array![1.0, 0.0, 0.0].view()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn ntk_decomposition_identity_holds() {
        // ⟨Φ(x),Φ(x')⟩ = Σ_j g_j(x) g_j(x') ⟨∇f_j(x), ∇f_j(x')⟩ on random pairs.
        let mut rng = crate::testutil::rng(9);
        for trial in 0..100 {
            let m = MoEModel::<f64>::init(cfg(3, 5, 1, 1000 + trial)).unwrap();
            let x = Array1::from_vec(crate::testutil::random_vec::<f64>(&mut rng, 5));
            let y = Array1::from_vec(crate::testutil::random_vec::<f64>(&mut rng, 5));
            let full = m.ntk_features(x.view()).unwrap().dot(&m.ntk_features(y.view()).unwrap());
            let gx = m.init_gates_single_layer(x.view()).unwrap();
            let gy = m.init_gates_single_layer(y.view()).unwrap();
            let bx = m.expert_grad_features(x.view()).unwrap();
            let by = m.expert_grad_features(y.view()).unwrap();
            let decomposed: f64 = (0..3).map(|j| gx[j] * gy[j] * bx[j].dot(&by[j])).sum();
            let scale = full.abs().max(decomposed.abs()).max(1e-12);
            assert!(
                (full - decomposed).abs() / scale < 1e-9,
                "identity violated: {full} vs {decomposed}"
            );
        }
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let mut m = MoEModel::<f64>::init(cfg(2, 3, 1, 91)).unwrap();
        let set = tiny_set(4, 3, 17);
        let hyper = TrainHyper {
            learning_rate: 1e12,
            steps: 50,
            ridge_lambda: None,
            checkpoint_interval: 10,
        };
        match m.train(&set, &hyper) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn param_dynamics_formula_and_shapes() {
        let trace = TrainingTrace {
            steps: vec![0, 10, 20],
            sample_ids: vec![SampleId::new("a")],
            per_sample_loss: vec![vec![1.0], vec![0.5], vec![0.2]],
            param_norms: vec![
                vec![(ParamType::Router, 1.0), (ParamType::Expert, 2.0)],
                vec![(ParamType::Router, 2.0), (ParamType::Expert, 2.0)],
                vec![(ParamType::Router, 3.0), (ParamType::Expert, 2.0)],
            ],
        };
        let dyns = snapshot_param_dynamics(&trace).unwrap();
        let router = &dyns.iter().find(|(t, _)| *t == ParamType::Router).unwrap().1;
        // Norms [1,2,3], mean scale 2 → changes [0.5, 0.5].
        assert_eq!(router, &vec![0.5, 0.5]);
        let expert = &dyns.iter().find(|(t, _)| *t == ParamType::Expert).unwrap().1;
        assert_eq!(expert, &vec![0.0, 0.0]);
        assert_eq!(router.len(), trace.steps.len() - 1);

        let short = TrainingTrace {
            param_norms: trace.param_norms[..2].to_vec(),
            ..trace
        };
        assert!(snapshot_param_dynamics(&short).is_err());
    }
}
