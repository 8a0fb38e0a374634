//! Spectral hypergraph convolution network.
//!
//! Every layer computes `X' = act(N^ (X W + b))`, where `N^` is the original
//! propagation matrix `N` or, on instrumented layers, the adaptor's blend.
//! Graph-level models sum node embeddings and apply a linear classifier.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::herald::{self, glorot, GraphContext, HeraldOutput, HeraldTrace, HeraldVars};
use crate::tensor::{Tape, Tensor, Var};

/// How the adaptor is attached to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeraldMode {
    Off,
    /// An independent adaptor on every instrumented layer.
    PerLayer,
    /// One adaptor on the first instrumented layer; its `N^` is reused by
    /// every later instrumented layer.
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    Off,
    PerLayer,
    FastShared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    None,
    Sum,
}

/// Update strength `a` as a function of the 1-based layer index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StrengthSchedule {
    Cosine,
    Constant { a: f64 },
}

impl StrengthSchedule {
    pub fn at(&self, layer: usize) -> f64 {
        match *self {
            StrengthSchedule::Cosine => herald::a_schedule(layer),
            StrengthSchedule::Constant { a } => a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub herald: Placement,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    /// Output width `h` of the adaptor's `W_e` and `W_v`.
    pub herald_hidden: usize,
    pub sigma: f64,
    pub schedule: StrengthSchedule,
    pub dropout: f64,
    pub bias: bool,
    pub readout: Readout,
    pub num_classes: usize,
}

/// Network depth used for each graph benchmark; 3 for unknown names.
pub fn graph_depth_for(dataset: &str) -> usize {
    match dataset.to_ascii_uppercase().as_str() {
        "MUTAG" => 4,
        "PTC" | "PTC_MR" | "NCI1" => 2,
        _ => 3,
    }
}

fn placements(depth: usize, mode: HeraldMode) -> Vec<Placement> {
    // adaptors sit on every layer after the first
    (1..=depth)
        .map(|l| match (mode, l >= 2) {
            (HeraldMode::Off, _) | (_, false) => Placement::Off,
            (HeraldMode::PerLayer, true) => Placement::PerLayer,
            (HeraldMode::Fast, true) => Placement::FastShared,
        })
        .collect()
}

impl ModelConfig {
    /// Node classifier: `depth` layers `in -> hidden -> ... -> classes`,
    /// ReLU on hidden layers, adaptors on layers `2..=depth`.
    pub fn node(
        in_dim: usize,
        hidden: usize,
        num_classes: usize,
        depth: usize,
        mode: HeraldMode,
    ) -> Self {
        let place = placements(depth, mode);
        let layers = (0..depth)
            .map(|i| LayerSpec {
                in_dim: if i == 0 { in_dim } else { hidden },
                out_dim: if i + 1 == depth { num_classes } else { hidden },
                herald: place[i],
                activation: if i + 1 == depth {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        ModelConfig {
            layers,
            herald_hidden: hidden,
            sigma: herald::DEFAULT_SIGMA,
            schedule: StrengthSchedule::Cosine,
            dropout: 0.5,
            bias: true,
            readout: Readout::None,
            num_classes,
        }
    }

    /// Graph classifier: `depth` ReLU layers of width `hidden`, a summation
    /// readout and a linear head.
    pub fn graph(
        in_dim: usize,
        hidden: usize,
        num_classes: usize,
        depth: usize,
        mode: HeraldMode,
    ) -> Self {
        let place = placements(depth, mode);
        let layers = (0..depth)
            .map(|i| LayerSpec {
                in_dim: if i == 0 { in_dim } else { hidden },
                out_dim: hidden,
                herald: place[i],
                activation: Activation::Relu,
            })
            .collect();
        ModelConfig {
            layers,
            herald_hidden: hidden,
            sigma: herald::DEFAULT_SIGMA,
            schedule: StrengthSchedule::Cosine,
            dropout: 0.5,
            bias: true,
            readout: Readout::Sum,
            num_classes,
        }
    }

    pub fn herald_mode(&self) -> HeraldMode {
        if self
            .layers
            .iter()
            .any(|l| l.herald == Placement::FastShared)
        {
            HeraldMode::Fast
        } else if self.layers.iter().any(|l| l.herald == Placement::PerLayer) {
            HeraldMode::PerLayer
        } else {
            HeraldMode::Off
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.layers.is_empty() {
            return cfg("model needs at least one layer".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return cfg(format!("layer {} has a zero width", i + 1));
            }
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return cfg(format!(
                    "layer {} expects width {}, previous layer produces {}",
                    i + 1,
                    l.in_dim,
                    self.layers[i - 1].out_dim
                ));
            }
        }
        let modes: Vec<_> = self.layers.iter().map(|l| l.herald).collect();
        if modes.contains(&Placement::PerLayer) && modes.contains(&Placement::FastShared) {
            return cfg("per-layer and shared adaptors cannot be mixed".into());
        }
        if self.herald_mode() != HeraldMode::Off && self.herald_hidden == 0 {
            return cfg("adaptor width must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return cfg(format!("sigma must be positive, got {}", self.sigma));
        }
        if let StrengthSchedule::Constant { a } = self.schedule {
            if !(0.0..=1.0).contains(&a) {
                return cfg(format!("update strength must lie in [0, 1], got {a}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.num_classes == 0 {
            return cfg("need at least one class".into());
        }
        let last = self.layers.last().unwrap();
        if self.readout == Readout::None {
            if last.activation != Activation::Identity {
                return cfg("the output layer must use the identity activation".into());
            }
            if last.out_dim != self.num_classes {
                return cfg(format!(
                    "output layer width {} does not match {} classes",
                    last.out_dim, self.num_classes
                ));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct HeraldSlots {
    w_e: usize,
    w_v: usize,
    w_s: usize,
}

#[derive(Clone, Debug)]
struct LayerSlots {
    weight: usize,
    bias: Option<usize>,
    herald: Option<HeraldSlots>,
}

/// Tape handles for every parameter, in [`ParamStore`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// The graph constants placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub propagation: Var,
    pub averaging: Var,
}

impl GraphVars {
    pub fn new(tape: &mut Tape, ctx: &GraphContext) -> Result<Self> {
        Ok(GraphVars {
            propagation: tape.constant(ctx.propagation.clone())?,
            averaging: tape.constant(ctx.averaging.clone())?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `|V| x C` for node models, `1 x C` for graph models.
    pub logits: Var,
    /// Adaptor calls made during the pass, keyed by 1-based layer index.
    pub traces: Vec<(usize, HeraldTrace)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layers: Vec<LayerSlots>,
    classifier: Option<(usize, Option<usize>)>,
}

enum Init<'a> {
    Random(&'a mut ChaCha8Rng),
    Zeros,
}

impl Model {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Init::Random(&mut rng))
    }

    fn build(config: ModelConfig, mut init: Init<'_>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut layers = Vec::with_capacity(config.layers.len());
        let h = config.herald_hidden;
        let mut shared_done = false;
        for (i, spec) in config.layers.iter().enumerate() {
            let weight_init = |fan_in, fan_out, init: &mut Init<'_>| match init {
                Init::Random(rng) => glorot(fan_in, fan_out, *rng),
                Init::Zeros => Tensor::zeros(&[fan_in, fan_out]),
            };
            let weight = params.push(
                format!("layers.{i}.weight"),
                weight_init(spec.in_dim, spec.out_dim, &mut init),
            );
            let bias = config.bias.then(|| {
                params.push(
                    format!("layers.{i}.bias"),
                    Tensor::zeros(&[1, spec.out_dim]),
                )
            });
            let owns_adaptor = match spec.herald {
                Placement::Off => false,
                Placement::PerLayer => true,
                Placement::FastShared => !std::mem::replace(&mut shared_done, true),
            };
            let herald = if owns_adaptor {
                let p = match &mut init {
                    Init::Random(rng) => {
                        herald::HeraldParams::init(spec.in_dim, h, config.sigma, *rng)?
                    }
                    Init::Zeros => herald::HeraldParams::new(
                        Tensor::zeros(&[spec.in_dim, h]),
                        Tensor::zeros(&[spec.in_dim, h]),
                        Tensor::zeros(&[h, 1]),
                        config.sigma,
                    )?,
                };
                Some(HeraldSlots {
                    w_e: params.push(format!("layers.{i}.herald.w_e"), p.w_e),
                    w_v: params.push(format!("layers.{i}.herald.w_v"), p.w_v),
                    w_s: params.push(format!("layers.{i}.herald.w_s"), p.w_s),
                })
            } else {
                None
            };
            layers.push(LayerSlots {
                weight,
                bias,
                herald,
            });
        }
        let classifier = if config.readout == Readout::Sum {
            let width = config.layers.last().unwrap().out_dim;
            let w = match &mut init {
                Init::Random(rng) => glorot(width, config.num_classes, *rng),
                Init::Zeros => Tensor::zeros(&[width, config.num_classes]),
            };
            let wi = params.push("classifier.weight".into(), w);
            let bi = config.bias.then(|| {
                params.push(
                    "classifier.bias".into(),
                    Tensor::zeros(&[1, config.num_classes]),
                )
            });
            Some((wi, bi))
        } else {
            None
        };
        Ok(Model {
            config,
            params,
            layers,
            classifier,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::build(config, Init::Zeros)?;
        let mut given: BTreeMap<String, Tensor> = named.into_iter().collect();
        for (name, slot) in model
            .params
            .names
            .iter()
            .zip(model.params.tensors.iter_mut())
        {
            let t = given
                .remove(name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = given.keys().next() {
            return Err(Error::Validation(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_len()
    }

    /// Number of distinct adaptor parameter sets.
    pub fn herald_instances(&self) -> usize {
        self.layers.iter().filter(|l| l.herald.is_some()).count()
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    /// Returns how many tensors were copied.
    pub fn copy_shared_from(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        for (name, slot) in self.params.names.iter().zip(self.params.tensors.iter_mut()) {
            if let Some(t) = other.params.get(name) {
                if t.shape() == slot.shape() {
                    *slot = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Wraps vars already on a tape, one per parameter in store order.
    pub fn bind_vars(&self, tape: &Tape, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (v, t) in vars.iter().zip(&self.params.tensors) {
            if tape.shape(*v) != t.shape() {
                return Err(Error::shape("bind_vars", tape.shape(*v), t.shape()));
            }
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
        })
    }

    fn herald_vars(&self, bound: &BoundParams, s: HeraldSlots) -> HeraldVars {
        HeraldVars {
            w_e: bound.vars[s.w_e],
            w_v: bound.vars[s.w_v],
            w_s: bound.vars[s.w_s],
        }
    }

    /// Shared forward pass. `dropout` carries the RNG for training-mode
    /// dropout; `None` runs in evaluation mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        graph: GraphVars,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim() {
            return Err(Error::shape(
                "model input",
                &shape,
                &[shape.first().copied().unwrap_or(0), self.config.input_dim()],
            ));
        }
        let depth = self.layers.len();
        let mut h = x;
        let mut traces = Vec::new();
        let mut shared: Option<(HeraldVars, Var)> = None;
        for (i, (spec, slots)) in self.config.layers.iter().zip(&self.layers).enumerate() {
            let layer = i + 1;
            let a = self.config.schedule.at(layer);
            let n_hat = match spec.herald {
                Placement::Off => graph.propagation,
                Placement::PerLayer => {
                    let vars = self.herald_vars(bound, slots.herald.expect("per-layer slots"));
                    let trace = herald::herald_forward(
                        tape,
                        h,
                        graph.propagation,
                        graph.averaging,
                        &vars,
                        self.config.sigma,
                        a,
                    )?;
                    traces.push((layer, trace));
                    trace.n_hat
                }
                Placement::FastShared => match shared {
                    Some((_, n_hat)) => n_hat,
                    None => {
                        let vars = self.herald_vars(bound, slots.herald.expect("anchor slots"));
                        let trace = herald::herald_forward(
                            tape,
                            h,
                            graph.propagation,
                            graph.averaging,
                            &vars,
                            self.config.sigma,
                            a,
                        )?;
                        traces.push((layer, trace));
                        shared = Some((vars, trace.n_hat));
                        trace.n_hat
                    }
                },
            };
            let mut z = tape.matmul(h, bound.vars[slots.weight])?;
            if let Some(b) = slots.bias {
                z = tape.add_row(z, bound.vars[b])?;
            }
            z = tape.matmul(n_hat, z)?;
            h = match spec.activation {
                Activation::Relu => tape.relu(z)?,
                Activation::Identity => z,
            };
            let is_output = layer == depth && self.config.readout == Readout::None;
            if let (Some(rng), false) = (dropout.as_deref_mut(), is_output) {
                h = apply_dropout(tape, h, self.config.dropout, rng)?;
            }
        }
        let logits = match self.classifier {
            Some((w, b)) => {
                let pooled = tape.sum_cols(h)?;
                let mut out = tape.matmul(pooled, bound.vars[w])?;
                if let Some(b) = b {
                    out = tape.add_row(out, bound.vars[b])?;
                }
                out
            }
            None => h,
        };
        Ok(ForwardOutput { logits, traces })
    }

    /// Node logits `|V| x C`, evaluation mode.
    pub fn forward_node(&self, x: &Tensor, ctx: &GraphContext) -> Result<Tensor> {
        if self.config.readout != Readout::None {
            return Err(Error::Config("forward_node on a graph-level model".into()));
        }
        self.eval_logits(x, ctx)
    }

    /// Graph logits `1 x C`, evaluation mode.
    pub fn forward_graph(&self, x: &Tensor, ctx: &GraphContext) -> Result<Tensor> {
        if self.config.readout != Readout::Sum {
            return Err(Error::Config("forward_graph on a node-level model".into()));
        }
        self.eval_logits(x, ctx)
    }

    fn eval_logits(&self, x: &Tensor, ctx: &GraphContext) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.eval_pass(&mut tape, x, ctx)?;
        Ok(tape.value(out.logits).clone())
    }

    fn eval_pass(&self, tape: &mut Tape, x: &Tensor, ctx: &GraphContext) -> Result<ForwardOutput> {
        if x.is_matrix() && x.rows() != ctx.num_nodes() {
            return Err(Error::shape(
                "model input",
                x.shape(),
                &[ctx.num_nodes(), self.config.input_dim()],
            ));
        }
        let bound = self.bind(tape)?;
        let xv = tape.constant(x.clone())?;
        let gv = GraphVars::new(tape, ctx)?;
        self.forward(tape, &bound, xv, gv, None)
    }

    /// Every adaptor output of an evaluation-mode pass, by 1-based layer.
    pub fn herald_outputs(
        &self,
        x: &Tensor,
        ctx: &GraphContext,
    ) -> Result<Vec<(usize, HeraldOutput)>> {
        let mut tape = Tape::new();
        let out = self.eval_pass(&mut tape, x, ctx)?;
        Ok(out
            .traces
            .iter()
            .map(|(l, t)| (*l, HeraldOutput::from_trace(&tape, t)))
            .collect())
    }

    /// The single `N^` a shared-adaptor model reuses across its instrumented
    /// layers, with the 1-based layer where it is built.
    pub fn fast_herald_plan(
        &self,
        x: &Tensor,
        ctx: &GraphContext,
    ) -> Result<(usize, HeraldOutput)> {
        if self.config.herald_mode() != HeraldMode::Fast {
            return Err(Error::Config(
                "fast_herald_plan needs a shared-adaptor model".into(),
            ));
        }
        let mut outputs = self.herald_outputs(x, ctx)?;
        debug_assert_eq!(outputs.len(), 1);
        Ok(outputs.remove(0))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let named = ckpt
            .params
            .into_iter()
            .map(|p| Ok((p.name, Tensor::new(p.shape, p.data)?)))
            .collect::<Result<Vec<_>>>()?;
        Model::from_named(ckpt.config, named)
    }
}

fn apply_dropout(tape: &mut Tape, h: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if rate == 0.0 {
        return Ok(h);
    }
    let keep = 1.0 / (1.0 - rate);
    let value = tape.value(h);
    let data = (0..value.numel())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(value.shape().to_vec(), data)?)?;
    tape.mul(h, m)
}

const CHECKPOINT_FORMAT: &str = "herald-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: the model config plus every parameter as
/// name, shape and row-major payload.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}
