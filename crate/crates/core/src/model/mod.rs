//! The recurrent multi-branch fusion network.
//!
//! Parameter names (checkpoint keys), with `{b}` one of `pos`/`neg`
//! (or `joint` for the single-branch variant) and `{i}` a block index:
//!
//! | name | shape |
//! |---|---|
//! | `input.{pos,neg}` / `input.joint` | 3×3 conv, 1 (3 for joint) → C |
//! | `enh.frame` | 3×3 conv, 1 → C |
//! | `enh.prev` | 1×1 conv, 2r² → C, fed the space-to-depth of the previous output |
//! | `enh.fuse` | 3×3 conv, 3C → C over `[frame, h, prev]` |
//! | `ffm.{b}.fuse.conv`, `ffm.{b}.fuse.bn` | basic block, 2C → C |
//! | `ffm.{b}.{local,global}.{conv1,bn1,conv2,bn2}` | 1×1 attention, C → C/4 → C |
//! | `ffm.{b}.lateral` | 1×1 conv, 2C → C (lateral variant) |
//! | `branch.{b}.block{i}.{conv1,conv2}` | residual block convs, C → C |
//! | `fem{i}.{b}.gate.block.{conv,bn}` | basic block, C → C |
//! | `fem{i}.{b}.gate.{w,b}` | 3×3 weight and bias convs, C → C |
//! | `fem{i}.{b}.attn.v` | 1×1 conv, C → C |
//! | `fem{i}.{b}.attn.{q,k}` | 1×1 conv, C → C₁ |
//! | `fem{i}.{b}.lateral` | 1×1 conv, 2C → C (lateral variant) |
//! | `fuse` | 3×3 conv, 2C (C single) → C |
//! | `state` | 3×3 conv, C → C, the next hidden state |
//! | `head` | 3×3 conv, C → 2r², pixel-shuffled to the output |
//!
//! Every conv stores `.weight` `[Cout,Cin,k,k]` and `.bias` `[Cout]`; every
//! batch norm stores `.weight`, `.bias` and the buffers `.running_mean`,
//! `.running_var`.
//!
//! Initialization: conv weights uniform in ±1/√fan_in and biases zero, with
//! three exceptions that make the network start close to its plain residual
//! path. The head is zero, each FEM gate starts as the identity (zero
//! weights, unit multiplier bias, zero offset) and each FEM value projection
//! is zero.

mod layers;

use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{read_checkpoint, write_checkpoint, BatchStats, CheckpointEntry, Scalar, Tensor};

pub use layers::{Forward, Mode, RecurrentState, StepInput};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    Multi,
    Single,
}

/// How enhancement features enter a branch, or how branches exchange.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// The attention module.
    Module,
    /// Concatenate and mix with a 1×1 conv.
    Lateral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateFn {
    Sigmoid,
    Softmax,
}

/// Ablation lattice, from one plain branch up to the full network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    pub fn modes(self) -> (BranchMode, FusionMode, FusionMode) {
        use FusionMode::*;
        match self {
            Variant::A => (BranchMode::Single, Lateral, Lateral),
            Variant::B => (BranchMode::Multi, Lateral, Lateral),
            Variant::C => (BranchMode::Multi, Lateral, Module),
            Variant::D => (BranchMode::Multi, Module, Lateral),
            Variant::E => (BranchMode::Multi, Module, Module),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::A => "model#A",
            Variant::B => "model#B",
            Variant::C => "model#C",
            Variant::D => "model#D",
            Variant::E => "model#E",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let tail = s.strip_prefix("model#").unwrap_or(s);
        match tail.to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            _ => Err(Error::Config(format!("unknown model variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: usize,
    pub channels: usize,
    pub num_blocks: usize,
    /// C₁ / C for the attention query and key projections.
    pub attn_channels_ratio: f64,
    pub branch_mode: BranchMode,
    pub ffm_mode: FusionMode,
    pub fem_mode: FusionMode,
    pub fem_gate_fn: GateFn,
    pub normalize_input: bool,
    /// Largest H·W the cross-branch attention will build a map for.
    pub max_attention_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            channels: 16,
            num_blocks: 2,
            attn_channels_ratio: 0.125,
            branch_mode: BranchMode::Multi,
            ffm_mode: FusionMode::Module,
            fem_mode: FusionMode::Module,
            fem_gate_fn: GateFn::Sigmoid,
            normalize_input: true,
            max_attention_positions: 1024,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.branch_mode, self.ffm_mode, self.fem_mode) = v.modes();
        self
    }

    /// Which ablation point the structural modes correspond to.
    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.modes() == (self.branch_mode, self.ffm_mode, self.fem_mode))
    }

    pub fn attn_channels(&self) -> usize {
        (self.channels as f64 * self.attn_channels_ratio).round() as usize
    }

    /// Hidden width of the FFM attention bottleneck.
    pub fn ffm_hidden(&self) -> usize {
        (self.channels / 4).max(1)
    }

    pub fn branches(&self) -> &'static [&'static str] {
        match self.branch_mode {
            BranchMode::Multi => &["pos", "neg"],
            BranchMode::Single => &["joint"],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_power_of_two() || self.scale < 2 {
            return Err(Error::Config(format!("scale must be a power of two ≥ 2, got {}", self.scale)));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        let c1 = self.channels as f64 * self.attn_channels_ratio;
        if !(c1 >= 1.0 && (c1 - c1.round()).abs() < 1e-9) {
            return Err(Error::Config(format!(
                "attn_channels_ratio {} of {} channels is not a positive whole number",
                self.attn_channels_ratio, self.channels
            )));
        }
        if self.max_attention_positions == 0 {
            return Err(Error::Config("max_attention_positions must be positive".into()));
        }
        Ok(())
    }

    /// Recover the structural fields from checkpoint names and shapes;
    /// the rest come from `base`.
    pub fn infer_from<T: Scalar>(entries: &[CheckpointEntry<T>], base: &ModelConfig) -> Result<ModelConfig> {
        let find = |name: &str| entries.iter().find(|e| e.name == name).map(|e| e.tensor.shape().to_vec());
        let missing = |name: &str| Error::Data(format!("checkpoint lacks `{name}`"));
        let mut cfg = base.clone();
        let head = find("head.weight").ok_or_else(|| missing("head.weight"))?;
        cfg.channels = head[1];
        let r2 = head[0] / 2;
        cfg.scale = (r2 as f64).sqrt().round() as usize;
        if cfg.scale * cfg.scale * 2 != head[0] {
            return Err(Error::Data(format!("head has {} outputs, not 2r²", head[0])));
        }
        cfg.branch_mode = if find("input.joint.weight").is_some() { BranchMode::Single } else { BranchMode::Multi };
        let b0 = cfg.branches()[0];
        cfg.ffm_mode =
            if find(&format!("ffm.{b0}.lateral.weight")).is_some() { FusionMode::Lateral } else { FusionMode::Module };
        cfg.num_blocks = (0..).take_while(|i| find(&format!("branch.{b0}.block{i}.conv1.weight")).is_some()).count();
        if let Some(q) = find("fem0.pos.attn.q.weight") {
            cfg.fem_mode = FusionMode::Module;
            cfg.attn_channels_ratio = q[0] as f64 / cfg.channels as f64;
        } else {
            cfg.fem_mode = FusionMode::Lateral;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in ±1/√fan_in: Kaiming-uniform on fan-in with leaky slope √5.
    Kaiming(usize),
    Zeros,
    Ones,
}

#[derive(Default)]
struct Layout {
    params: Vec<(String, Vec<usize>, Init)>,
    norms: Vec<(String, usize)>,
}

impl Layout {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.conv_init(name, cin, cout, k, Init::Kaiming(cin * k * k));
    }

    fn conv_init(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: Init) {
        self.conv_full(name, cin, cout, k, init, Init::Zeros);
    }

    fn conv_full(&mut self, name: &str, cin: usize, cout: usize, k: usize, weight: Init, bias: Init) {
        self.params.push((format!("{name}.weight"), vec![cout, cin, k, k], weight));
        self.params.push((format!("{name}.bias"), vec![cout], bias));
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.push((format!("{name}.weight"), vec![c], Init::Ones));
        self.params.push((format!("{name}.bias"), vec![c], Init::Zeros));
        self.norms.push((name.to_string(), c));
    }

    fn basic_block(&mut self, name: &str, cin: usize, cout: usize) {
        self.conv(&format!("{name}.conv"), cin, cout, 3);
        self.bn(&format!("{name}.bn"), cout);
    }

    fn attention(&mut self, name: &str, c: usize, hidden: usize) {
        self.conv(&format!("{name}.conv1"), c, hidden, 1);
        self.bn(&format!("{name}.bn1"), hidden);
        self.conv(&format!("{name}.conv2"), hidden, c, 1);
        self.bn(&format!("{name}.bn2"), c);
    }

    fn build(cfg: &ModelConfig) -> Layout {
        let mut l = Layout::default();
        let c = cfg.channels;
        let r2 = cfg.scale * cfg.scale;
        match cfg.branch_mode {
            BranchMode::Multi => {
                l.conv("input.pos", 1, c, 3);
                l.conv("input.neg", 1, c, 3);
            }
            BranchMode::Single => l.conv("input.joint", 3, c, 3),
        }
        l.conv("enh.frame", 1, c, 3);
        l.conv("enh.prev", 2 * r2, c, 1);
        l.conv("enh.fuse", 3 * c, c, 3);
        for b in cfg.branches() {
            match cfg.ffm_mode {
                FusionMode::Module => {
                    l.basic_block(&format!("ffm.{b}.fuse"), 2 * c, c);
                    l.attention(&format!("ffm.{b}.local"), c, cfg.ffm_hidden());
                    l.attention(&format!("ffm.{b}.global"), c, cfg.ffm_hidden());
                }
                FusionMode::Lateral => l.conv(&format!("ffm.{b}.lateral"), 2 * c, c, 1),
            }
            for i in 0..cfg.num_blocks {
                l.conv(&format!("branch.{b}.block{i}.conv1"), c, c, 3);
                l.conv(&format!("branch.{b}.block{i}.conv2"), c, c, 3);
            }
        }
        if cfg.branch_mode == BranchMode::Multi {
            for i in 0..cfg.num_blocks {
                for b in ["pos", "neg"] {
                    let p = format!("fem{i}.{b}");
                    match cfg.fem_mode {
                        FusionMode::Module => {
                            l.basic_block(&format!("{p}.gate.block"), c, c);
                            // The gate starts as the identity on the block output
                            // (unit multiplier, zero offset) so stacked modules do
                            // not shrink the signal before training begins.
                            l.conv_full(&format!("{p}.gate.w"), c, c, 3, Init::Zeros, Init::Ones);
                            l.conv_init(&format!("{p}.gate.b"), c, c, 3, Init::Zeros);
                            // Zero value projection: the exchange starts as the identity,
                            // since the un-normalized gate sums over every position.
                            l.conv_init(&format!("{p}.attn.v"), c, c, 1, Init::Zeros);
                            l.conv(&format!("{p}.attn.q"), c, cfg.attn_channels(), 1);
                            l.conv(&format!("{p}.attn.k"), c, cfg.attn_channels(), 1);
                        }
                        FusionMode::Lateral => l.conv(&format!("{p}.lateral"), 2 * c, c, 1),
                    }
                }
            }
        }
        let fuse_in = if cfg.branch_mode == BranchMode::Multi { 2 * c } else { c };
        l.conv("fuse", fuse_in, c, 3);
        l.conv("state", c, c, 3);
        // Zero head: predictions start at 0 instead of at the scale of the
        // normalized module features, which otherwise drives the fusion ReLU
        // dead within the first few updates.
        l.conv_init("head", c, 2 * r2, 3, Init::Zeros);
        l
    }
}

/// Ordered name → tensor table.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensors<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> NamedTensors<T> {
    fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self { entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: NamedTensors<T>,
    /// Batch-norm running statistics.
    buffers: NamedTensors<T>,
}

impl<T: Scalar> Model<T> {
    /// Kaiming-uniform convs, zero biases, identity batch norms. Each tensor
    /// draws from its own stream `init/<name>`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, |name, init, shape| match init {
            Init::Kaiming(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, &format!("init/{name}"));
                Tensor::from_fn(shape, |_| T::of(r.random_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
        })
    }

    /// Every conv zeroed except the input convs; batch norms untouched.
    pub fn zero_init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        let norms: Vec<String> =
            m.buffers.names().filter_map(|n| n.strip_suffix(".running_mean")).map(str::to_string).collect();
        for (name, t) in m.params.iter_mut() {
            let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
            if !name.starts_with("input.") && !norms.iter().any(|n| n == layer) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(m)
    }

    fn build(config: ModelConfig, mut init: impl FnMut(&str, Init, &[usize]) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        let params = layout.params.iter().map(|(n, s, i)| (n.clone(), init(n, *i, s))).collect();
        let mut buffers = Vec::new();
        for (n, c) in &layout.norms {
            buffers.push((format!("{n}.running_mean"), Tensor::zeros(&[*c])));
            buffers.push((format!("{n}.running_var"), Tensor::full(&[*c], T::one())));
        }
        Ok(Self { config, params: NamedTensors::new(params), buffers: NamedTensors::new(buffers) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Non-structural fields (gate, normalization, attention ceiling) may change freely.
    pub fn set_runtime_options(&mut self, gate: GateFn, normalize_input: bool, max_attention_positions: usize) {
        self.config.fem_gate_fn = gate;
        self.config.normalize_input = normalize_input;
        self.config.max_attention_positions = max_attention_positions;
    }

    pub fn params(&self) -> &NamedTensors<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensors<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &NamedTensors<T> {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Fold one forward's batch statistics into the running averages, in call order.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::of(BN_MOMENTUM);
        for (name, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{name}.{suffix}")) {
                    for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                        *r = (T::one() - m) * *r + m * b;
                    }
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |nt: &NamedTensors<T>| NamedTensors::new(nt.iter().map(|(n, t)| (n.to_string(), t.cast())).collect());
        Model { config: self.config.clone(), params: conv(&self.params), buffers: conv(&self.buffers) }
    }

    /// Parameters followed by buffers, in layout order.
    pub fn to_entries(&self) -> Vec<CheckpointEntry<T>> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, t)| CheckpointEntry { name: n.to_string(), tensor: t.clone() })
            .collect()
    }

    /// Rebuild from checkpoint entries; the structure is read off the
    /// names and shapes, everything else is taken from `base`.
    pub fn from_entries(entries: Vec<CheckpointEntry<T>>, base: &ModelConfig) -> Result<Self> {
        let config = ModelConfig::infer_from(&entries, base)?;
        let mut model = Self::build(config, |_, _, shape| Tensor::zeros(shape))?;
        let expected = model.params.len() + model.buffers.len();
        if entries.len() != expected {
            return Err(Error::Data(format!("checkpoint has {} tensors, model expects {expected}", entries.len())));
        }
        for e in entries {
            let slot = match model.params.get_mut(&e.name) {
                Some(t) => t,
                None => model
                    .buffers
                    .get_mut(&e.name)
                    .ok_or_else(|| Error::Data(format!("unexpected checkpoint tensor `{}`", e.name)))?,
            };
            if slot.shape() != e.tensor.shape() {
                return Err(Error::Data(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    e.name,
                    e.tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = e.tensor;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_entries())
    }

    pub fn load(path: &Path, base: &ModelConfig) -> Result<Self> {
        Self::from_entries(read_checkpoint(path)?, base)
    }
}

#[cfg(test)]
mod tests;
