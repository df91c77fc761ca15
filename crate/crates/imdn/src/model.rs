//! Architecture builders and forward semantics for IMDN, IMDN_AS and the
//! ablation variants, plus weight initialization and serialization.
//!
//! The forward pass is written once, generically over a [`Ctx`]: the plain
//! evaluator computes tensors directly for inference, while the tape context
//! records the same topology onto an autograd [`Tape`] for training. Both
//! walk identical operations, so their outputs agree bit for bit.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autograd::{AutogradError, NodeId, Tape};
use crate::tensor::{self, ConvLayer, Tensor, TensorError};

const WEIGHT_MAGIC: &[u8; 6] = b"IMDNW1";
const WEIGHT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown ablation variant '{0}'")]
    UnknownVariant(String),
    #[error("model has no layer named '{0}'")]
    MissingLayer(String),
    #[error("input {h}x{w} must have height and width divisible by 4")]
    InputNotDivisible { h: usize, w: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("weight file: {0}")]
    Format(String),
}

/// Which refinement structure a block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrmVariant {
    /// Progressive refinement: split-and-refine chain plus a fusing 1x1.
    Prm,
    /// Three cascaded 3x3 convolutions, no channel splits, no fusing 1x1.
    Plain3Conv,
}

/// Structural hyperparameters of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ImdnConfig {
    pub num_blocks: usize,
    pub channels: usize,
    /// Channels preserved at each refinement step.
    pub distilled: usize,
    /// Channels passed on to the next refinement step.
    pub coarse: usize,
    /// Width of the squeezed attention descriptor.
    pub cca_squeeze: usize,
    pub leaky_slope: f64,
    pub scale: usize,
    pub use_cca: bool,
    pub use_iic: bool,
    pub prm_variant: PrmVariant,
}

impl Default for ImdnConfig {
    fn default() -> Self {
        ImdnConfig {
            num_blocks: 6,
            channels: 64,
            distilled: 16,
            coarse: 48,
            cca_squeeze: 4,
            leaky_slope: 0.05,
            scale: 4,
            use_cca: true,
            use_iic: true,
            prm_variant: PrmVariant::Prm,
        }
    }
}

impl ImdnConfig {
    pub fn with_scale(scale: usize) -> Self {
        ImdnConfig {
            scale,
            ..Default::default()
        }
    }

    /// A narrow configuration for tests and toy training. Distilled/coarse
    /// keep the 1:3 ratio of the full network.
    pub fn tiny(num_blocks: usize, channels: usize, scale: usize) -> Self {
        ImdnConfig {
            num_blocks,
            channels,
            distilled: channels / 4,
            coarse: channels - channels / 4,
            cca_squeeze: (channels / 16).max(1),
            scale,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_blocks == 0 {
            return fail("num_blocks must be positive".into());
        }
        if self.distilled + self.coarse != self.channels {
            return fail(format!(
                "distilled ({}) + coarse ({}) must equal channels ({})",
                self.distilled, self.coarse, self.channels
            ));
        }
        if self.distilled == 0 || self.coarse == 0 {
            return fail("distilled and coarse must be positive".into());
        }
        if self.use_cca && (self.cca_squeeze == 0 || self.channels % self.cca_squeeze != 0) {
            return fail(format!(
                "cca_squeeze ({}) must divide channels ({})",
                self.cca_squeeze, self.channels
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        if self.scale == 0 || self.scale > 4 {
            return fail(format!("scale {} outside 1..=4", self.scale));
        }
        Ok(())
    }
}

/// Named ablation networks (all four blocks, scale-parametric).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Blocks are three plain 3x3 convolutions; no fusing 1x1, no CCA, no IIC.
    Plain3ConvB4,
    /// Refinement blocks without CCA or IIC.
    BasicB4,
    /// Refinement blocks with CCA, without IIC.
    BasicB4Cca,
    /// Refinement blocks with CCA and IIC.
    B4CcaIic,
}

impl AblationVariant {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let norm: String = s
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == '_' || c == '+' { '-' } else { c })
            .collect();
        match norm.as_str() {
            "plain-3conv-b4" | "plain3conv-b4" => Ok(AblationVariant::Plain3ConvB4),
            "basic-b4" => Ok(AblationVariant::BasicB4),
            "basic-b4-cca" => Ok(AblationVariant::BasicB4Cca),
            "b4" | "b4-cca-iic" => Ok(AblationVariant::B4CcaIic),
            _ => Err(ModelError::UnknownVariant(s.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Plain3ConvB4 => "plain-3conv-B4",
            AblationVariant::BasicB4 => "basic-B4",
            AblationVariant::BasicB4Cca => "basic-B4+CCA",
            AblationVariant::B4CcaIic => "B4",
        }
    }
}

/// Network family: upsampling IMDN or same-size IMDN_AS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Imdn,
    /// Two stride-2 downsampling convolutions in front of the trunk and a
    /// 4x pixel shuffle behind it: input and output have the same spatial
    /// size, which must be divisible by 4.
    ImdnAs,
}

/// Activation applied directly after a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Leaky,
    Relu,
    Sigmoid,
}

/// One named convolution with analyzer metadata.
#[derive(Debug, Clone)]
pub struct LayerSlot {
    pub name: String,
    pub layer: ConvLayer,
    pub activation: Activation,
    /// On the serial trunk path (attention branches are not).
    pub trunk: bool,
    /// Spatial divisor of this layer's operating resolution relative to the
    /// model input (1 for IMDN layers; 2 and 4 behind the IMDN_AS
    /// downsampling convolutions).
    pub res_div: usize,
}

/// An ordered, named composition of convolution layers realizing one of the
/// network variants. Immutable during inference; training mutates layers
/// through [`ModelGraph::layer_mut`].
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub config: ImdnConfig,
    pub kind: ArchKind,
    slots: Vec<LayerSlot>,
}

impl ModelGraph {
    pub fn slots(&self) -> &[LayerSlot] {
        &self.slots
    }

    pub fn layer(&self, name: &str) -> Result<&ConvLayer, ModelError> {
        self.slots
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.layer)
            .ok_or_else(|| ModelError::MissingLayer(name.to_string()))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut ConvLayer, ModelError> {
        self.slots
            .iter_mut()
            .find(|s| s.name == name)
            .map(|s| &mut s.layer)
            .ok_or_else(|| ModelError::MissingLayer(name.to_string()))
    }

    /// Total learnable parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.layer.param_count()).sum()
    }

    /// Forward pass on plain tensors.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        let mut ctx = EvalCtx { model: self };
        forward_in_ctx(self, &mut ctx, input.clone())
    }

    /// Record the forward pass onto a tape. `input` becomes a leaf;
    /// parameters come from `params` (see [`ModelGraph::register_params`]).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamBinding,
        input: Tensor,
    ) -> Result<NodeId, ModelError> {
        let input = tape.leaf(input);
        let mut ctx = TapeCtx {
            model: self,
            tape,
            params,
        };
        forward_in_ctx(self, &mut ctx, input)
    }

    /// Insert every layer's weights and bias as tape leaves, in graph order.
    pub fn register_params(&self, tape: &mut Tape) -> ParamBinding {
        let mut order = Vec::with_capacity(self.slots.len());
        let mut by_name = HashMap::new();
        for slot in &self.slots {
            let w = tape.leaf(slot.layer.weights.clone());
            let b = tape.leaf(Tensor::from_vec(
                [slot.layer.bias.len(), 1, 1, 1],
                slot.layer.bias.clone(),
            ));
            order.push((slot.name.clone(), w, b));
            by_name.insert(slot.name.clone(), (w, b));
        }
        ParamBinding { order, by_name }
    }
}

/// Tape node ids of every named layer's weights and bias.
pub struct ParamBinding {
    order: Vec<(String, NodeId, NodeId)>,
    by_name: HashMap<String, (NodeId, NodeId)>,
}

impl ParamBinding {
    /// `(layer name, weight node, bias node)` in graph order.
    pub fn in_order(&self) -> &[(String, NodeId, NodeId)] {
        &self.order
    }

    pub fn get(&self, name: &str) -> Option<(NodeId, NodeId)> {
        self.by_name.get(name).copied()
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// IMDN: feature conv, `num_blocks` refinement blocks, optional intermediate
/// information collection, a long skip from the feature conv, and a
/// sub-pixel upsampler.
pub fn build_imdn(config: ImdnConfig) -> Result<ModelGraph, ModelError> {
    config.validate()?;
    let c = config.channels;
    let mut slots = Vec::new();
    push(&mut slots, "fea_conv", c, 3, 3, 1, 1, Activation::None, true, 1);
    push_blocks(&mut slots, &config, 1);
    if config.use_iic {
        push(
            &mut slots,
            "fusion",
            c,
            c * config.num_blocks,
            1,
            1,
            0,
            Activation::Leaky,
            true,
            1,
        );
    }
    push(&mut slots, "lr_conv", c, c, 3, 1, 1, Activation::None, true, 1);
    let s2 = config.scale * config.scale;
    push(&mut slots, "up_conv", 3 * s2, c, 3, 1, 1, Activation::None, true, 1);
    Ok(ModelGraph {
        config,
        kind: ArchKind::Imdn,
        slots,
    })
}

/// Same-size variant: two stride-2 downsampling convolutions in front of the
/// IMDN trunk and a fixed 4x pixel shuffle at the end.
pub fn build_imdn_as(mut config: ImdnConfig) -> Result<ModelGraph, ModelError> {
    config.scale = 1;
    config.validate()?;
    let c = config.channels;
    let mut slots = Vec::new();
    push(&mut slots, "down1", c, 3, 3, 2, 1, Activation::Leaky, true, 2);
    push(&mut slots, "down2", c, c, 3, 2, 1, Activation::Leaky, true, 4);
    push_blocks(&mut slots, &config, 4);
    if config.use_iic {
        push(
            &mut slots,
            "fusion",
            c,
            c * config.num_blocks,
            1,
            1,
            0,
            Activation::Leaky,
            true,
            4,
        );
    }
    push(&mut slots, "lr_conv", c, c, 3, 1, 1, Activation::None, true, 4);
    push(&mut slots, "up_conv", 3 * 16, c, 3, 1, 1, Activation::None, true, 4);
    Ok(ModelGraph {
        config,
        kind: ArchKind::ImdnAs,
        slots,
    })
}

/// The four-block ablation networks.
pub fn build_ablation(variant: AblationVariant, scale: usize) -> Result<ModelGraph, ModelError> {
    let (prm_variant, use_cca, use_iic) = match variant {
        AblationVariant::Plain3ConvB4 => (PrmVariant::Plain3Conv, false, false),
        AblationVariant::BasicB4 => (PrmVariant::Prm, false, false),
        AblationVariant::BasicB4Cca => (PrmVariant::Prm, true, false),
        AblationVariant::B4CcaIic => (PrmVariant::Prm, true, true),
    };
    build_imdn(ImdnConfig {
        num_blocks: 4,
        scale,
        use_cca,
        use_iic,
        prm_variant,
        ..Default::default()
    })
}

#[allow(clippy::too_many_arguments)]
fn push(
    slots: &mut Vec<LayerSlot>,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    stride: usize,
    padding: usize,
    activation: Activation,
    trunk: bool,
    res_div: usize,
) {
    slots.push(LayerSlot {
        name: name.to_string(),
        layer: ConvLayer::zeros(out_ch, in_ch, k, stride, padding),
        activation,
        trunk,
        res_div,
    });
}

fn push_blocks(slots: &mut Vec<LayerSlot>, config: &ImdnConfig, res_div: usize) {
    let c = config.channels;
    for b in 1..=config.num_blocks {
        let name = |part: &str| format!("block{b}.{part}");
        match config.prm_variant {
            PrmVariant::Prm => {
                push(slots, &name("c1"), c, c, 3, 1, 1, Activation::Leaky, true, res_div);
                push(slots, &name("c2"), c, config.coarse, 3, 1, 1, Activation::Leaky, true, res_div);
                push(slots, &name("c3"), c, config.coarse, 3, 1, 1, Activation::Leaky, true, res_div);
                push(
                    slots,
                    &name("c4"),
                    config.distilled,
                    config.coarse,
                    3,
                    1,
                    1,
                    Activation::Leaky,
                    true,
                    res_div,
                );
                if config.use_cca {
                    push(
                        slots,
                        &name("cca_down"),
                        config.cca_squeeze,
                        c,
                        1,
                        1,
                        0,
                        Activation::Relu,
                        false,
                        res_div,
                    );
                    push(
                        slots,
                        &name("cca_up"),
                        c,
                        config.cca_squeeze,
                        1,
                        1,
                        0,
                        Activation::Sigmoid,
                        false,
                        res_div,
                    );
                }
                push(slots, &name("c5"), c, c, 1, 1, 0, Activation::None, true, res_div);
            }
            PrmVariant::Plain3Conv => {
                push(slots, &name("c1"), c, c, 3, 1, 1, Activation::Leaky, true, res_div);
                push(slots, &name("c2"), c, c, 3, 1, 1, Activation::Leaky, true, res_div);
                push(slots, &name("c3"), c, c, 3, 1, 1, Activation::Leaky, true, res_div);
                if config.use_cca {
                    push(
                        slots,
                        &name("cca_down"),
                        config.cca_squeeze,
                        c,
                        1,
                        1,
                        0,
                        Activation::Relu,
                        false,
                        res_div,
                    );
                    push(
                        slots,
                        &name("cca_up"),
                        c,
                        config.cca_squeeze,
                        1,
                        1,
                        0,
                        Activation::Sigmoid,
                        false,
                        res_div,
                    );
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Generic forward
// ---------------------------------------------------------------------------

/// Operations a forward pass needs, abstracted over the value type.
trait Ctx {
    type Val: Clone;
    fn conv(&mut self, name: &str, x: &Self::Val) -> Result<Self::Val, ModelError>;
    fn leaky_relu(&mut self, x: &Self::Val, slope: f64) -> Self::Val;
    fn relu(&mut self, x: &Self::Val) -> Self::Val;
    fn sigmoid(&mut self, x: &Self::Val) -> Self::Val;
    fn split(&mut self, x: &Self::Val, first: usize)
        -> Result<(Self::Val, Self::Val), ModelError>;
    fn concat(&mut self, parts: &[Self::Val]) -> Result<Self::Val, ModelError>;
    fn pixel_shuffle(&mut self, x: &Self::Val, s: usize) -> Result<Self::Val, ModelError>;
    fn contrast_pool(&mut self, x: &Self::Val) -> Self::Val;
    fn scale(&mut self, x: &Self::Val, gates: &Self::Val) -> Result<Self::Val, ModelError>;
    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val, ModelError>;
}

/// Convolution plus the slot's recorded activation.
fn conv_act<C: Ctx>(
    g: &ModelGraph,
    ctx: &mut C,
    name: &str,
    x: &C::Val,
) -> Result<C::Val, ModelError> {
    let slot = g
        .slots
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| ModelError::MissingLayer(name.to_string()))?;
    let y = ctx.conv(name, x)?;
    Ok(match slot.activation {
        Activation::None => y,
        Activation::Leaky => ctx.leaky_relu(&y, g.config.leaky_slope),
        Activation::Relu => ctx.relu(&y),
        Activation::Sigmoid => ctx.sigmoid(&y),
    })
}

fn forward_block<C: Ctx>(
    g: &ModelGraph,
    ctx: &mut C,
    b: usize,
    input: &C::Val,
) -> Result<C::Val, ModelError> {
    let cfg = &g.config;
    let name = |part: &str| format!("block{b}.{part}");
    let body = match cfg.prm_variant {
        PrmVariant::Prm => {
            let c1 = conv_act(g, ctx, &name("c1"), input)?;
            let (refined1, coarse1) = ctx.split(&c1, cfg.distilled)?;
            let c2 = conv_act(g, ctx, &name("c2"), &coarse1)?;
            let (refined2, coarse2) = ctx.split(&c2, cfg.distilled)?;
            let c3 = conv_act(g, ctx, &name("c3"), &coarse2)?;
            let (refined3, coarse3) = ctx.split(&c3, cfg.distilled)?;
            let refined4 = conv_act(g, ctx, &name("c4"), &coarse3)?;
            let distilled = ctx.concat(&[refined1, refined2, refined3, refined4])?;
            let attended = if cfg.use_cca {
                forward_cca_in(g, ctx, b, &distilled)?
            } else {
                distilled
            };
            conv_act(g, ctx, &name("c5"), &attended)?
        }
        PrmVariant::Plain3Conv => {
            let c1 = conv_act(g, ctx, &name("c1"), input)?;
            let c2 = conv_act(g, ctx, &name("c2"), &c1)?;
            let mut out = conv_act(g, ctx, &name("c3"), &c2)?;
            if cfg.use_cca {
                out = forward_cca_in(g, ctx, b, &out)?;
            }
            out
        }
    };
    ctx.add(&body, input)
}

fn forward_cca_in<C: Ctx>(
    g: &ModelGraph,
    ctx: &mut C,
    b: usize,
    x: &C::Val,
) -> Result<C::Val, ModelError> {
    let pooled = ctx.contrast_pool(x);
    let squeezed = conv_act(g, ctx, &format!("block{b}.cca_down"), &pooled)?;
    let gates = conv_act(g, ctx, &format!("block{b}.cca_up"), &squeezed)?;
    ctx.scale(x, &gates)
}

fn forward_in_ctx<C: Ctx>(
    g: &ModelGraph,
    ctx: &mut C,
    input: C::Val,
) -> Result<C::Val, ModelError> {
    let cfg = &g.config;
    let fea = match g.kind {
        ArchKind::Imdn => conv_act(g, ctx, "fea_conv", &input)?,
        ArchKind::ImdnAs => {
            let d1 = conv_act(g, ctx, "down1", &input)?;
            conv_act(g, ctx, "down2", &d1)?
        }
    };

    let mut x = fea.clone();
    let mut block_outs = Vec::with_capacity(cfg.num_blocks);
    for b in 1..=cfg.num_blocks {
        x = forward_block(g, ctx, b, &x)?;
        if cfg.use_iic {
            block_outs.push(x.clone());
        }
    }
    let collected = if cfg.use_iic {
        let cat = ctx.concat(&block_outs)?;
        conv_act(g, ctx, "fusion", &cat)?
    } else {
        x
    };
    let lr = conv_act(g, ctx, "lr_conv", &collected)?;
    let skipped = ctx.add(&lr, &fea)?;
    let up = conv_act(g, ctx, "up_conv", &skipped)?;
    let shuffle = match g.kind {
        ArchKind::Imdn => cfg.scale,
        ArchKind::ImdnAs => 4,
    };
    ctx.pixel_shuffle(&up, shuffle)
}

struct EvalCtx<'a> {
    model: &'a ModelGraph,
}

impl Ctx for EvalCtx<'_> {
    type Val = Tensor;

    fn conv(&mut self, name: &str, x: &Tensor) -> Result<Tensor, ModelError> {
        if self.model.kind == ArchKind::ImdnAs && name == "down1" {
            let [_, _, h, w] = x.shape();
            if h % 4 != 0 || w % 4 != 0 {
                return Err(ModelError::InputNotDivisible { h, w });
            }
        }
        Ok(tensor::conv2d(x, self.model.layer(name)?)?)
    }

    fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Tensor {
        x.leaky_relu(slope)
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        x.relu()
    }

    fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        x.sigmoid()
    }

    fn split(&mut self, x: &Tensor, first: usize) -> Result<(Tensor, Tensor), ModelError> {
        Ok(x.channel_split(first)?)
    }

    fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor, ModelError> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat_channels(&refs)?)
    }

    fn pixel_shuffle(&mut self, x: &Tensor, s: usize) -> Result<Tensor, ModelError> {
        Ok(x.pixel_shuffle(s)?)
    }

    fn contrast_pool(&mut self, x: &Tensor) -> Tensor {
        x.global_contrast_pool()
    }

    fn scale(&mut self, x: &Tensor, gates: &Tensor) -> Result<Tensor, ModelError> {
        Ok(x.channel_scale(gates)?)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, ModelError> {
        Ok(a.add(b)?)
    }
}

struct TapeCtx<'a> {
    model: &'a ModelGraph,
    tape: &'a mut Tape,
    params: &'a ParamBinding,
}

impl Ctx for TapeCtx<'_> {
    type Val = NodeId;

    fn conv(&mut self, name: &str, x: &NodeId) -> Result<NodeId, ModelError> {
        if self.model.kind == ArchKind::ImdnAs && name == "down1" {
            let [_, _, h, w] = self.tape.value(*x).shape();
            if h % 4 != 0 || w % 4 != 0 {
                return Err(ModelError::InputNotDivisible { h, w });
            }
        }
        let (w, b) = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingLayer(name.to_string()))?;
        let layer = self.model.layer(name)?;
        Ok(self.tape.conv2d(*x, w, b, layer.stride, layer.padding)?)
    }

    fn leaky_relu(&mut self, x: &NodeId, slope: f64) -> NodeId {
        self.tape.leaky_relu(*x, slope)
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        self.tape.relu(*x)
    }

    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        self.tape.sigmoid(*x)
    }

    fn split(&mut self, x: &NodeId, first: usize) -> Result<(NodeId, NodeId), ModelError> {
        Ok(self.tape.channel_split(*x, first)?)
    }

    fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, ModelError> {
        Ok(self.tape.concat_channels(parts)?)
    }

    fn pixel_shuffle(&mut self, x: &NodeId, s: usize) -> Result<NodeId, ModelError> {
        Ok(self.tape.pixel_shuffle(*x, s)?)
    }

    fn contrast_pool(&mut self, x: &NodeId) -> NodeId {
        self.tape.global_contrast_pool(*x)
    }

    fn scale(&mut self, x: &NodeId, gates: &NodeId) -> Result<NodeId, ModelError> {
        Ok(self.tape.channel_scale(*x, *gates)?)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId, ModelError> {
        Ok(self.tape.add(*a, *b)?)
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Fan-in-scaled normal initialization, deterministic for a given seed.
///
/// Convolutions followed by an activation get the matching gain
/// (`sqrt(2 / (1 + slope^2))` for leaky, `sqrt(2)` for relu); plain and
/// sigmoid-gated convolutions use unit gain. Biases are zero.
pub fn init_weights(model: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = model.config.leaky_slope;
    for slot in &mut model.slots {
        let gain = match slot.activation {
            Activation::Leaky => (2.0 / (1.0 + slope * slope)).sqrt(),
            Activation::Relu => 2f64.sqrt(),
            Activation::Sigmoid | Activation::None => 1.0,
        };
        let fan_in = (slot.layer.in_channels() * slot.layer.kernel() * slot.layer.kernel()) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("finite std");
        for w in slot.layer.weights.data_mut() {
            *w = normal.sample(&mut rng);
        }
        slot.layer.bias.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// Weight file serialization
// ---------------------------------------------------------------------------
//
// Layout (all integers little-endian):
//   magic "IMDNW1" | version u32 | config block | records
// Config block:
//   arch u8 | prm_variant u8 | flags u8 (bit0 cca, bit1 iic) |
//   scale u32 | num_blocks u32 | channels u32 | distilled u32 |
//   cca_squeeze u32 | leaky_slope f64 | record_count u32
// Record:
//   name_len u16 | name bytes | rank u8 | dims u32 x rank | f64 payload

/// Serialize a model. Layers are written in graph order, so identical models
/// produce identical bytes.
pub fn save_weights(model: &ModelGraph, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_weights(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn write_weights(model: &ModelGraph, out: &mut Vec<u8>) -> Result<(), ModelError> {
    let cfg = &model.config;
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.push(match model.kind {
        ArchKind::Imdn => 0,
        ArchKind::ImdnAs => 1,
    });
    out.push(match cfg.prm_variant {
        PrmVariant::Prm => 0,
        PrmVariant::Plain3Conv => 1,
    });
    out.push(u8::from(cfg.use_cca) | (u8::from(cfg.use_iic) << 1));
    for v in [
        cfg.scale,
        cfg.num_blocks,
        cfg.channels,
        cfg.distilled,
        cfg.cca_squeeze,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.leaky_slope.to_le_bytes());
    out.extend_from_slice(&(model.slots.len() as u32 * 2).to_le_bytes());

    for slot in &model.slots {
        write_record(out, &format!("{}.weight", slot.name), &slot.layer.weights.shape(), slot.layer.weights.data());
        let bias_dims = [slot.layer.bias.len()];
        write_record(out, &format!("{}.bias", slot.name), &bias_dims, &slot.layer.bias);
    }
    Ok(())
}

fn write_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Deserialize a model saved with [`save_weights`].
pub fn load_weights(path: &Path) -> Result<ModelGraph, ModelError> {
    let bytes = std::fs::read(path)?;
    read_weights(&bytes)
}

fn read_weights(bytes: &[u8]) -> Result<ModelGraph, ModelError> {
    let mut r = Cursor { bytes, pos: 0 };
    let magic = r.take(6)?;
    if magic != WEIGHT_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let arch = r.u8()?;
    let prm = r.u8()?;
    let flags = r.u8()?;
    let scale = r.u32()? as usize;
    let num_blocks = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let distilled = r.u32()? as usize;
    let cca_squeeze = r.u32()? as usize;
    let leaky_slope = r.f64()?;
    let record_count = r.u32()?;

    let config = ImdnConfig {
        num_blocks,
        channels,
        distilled,
        coarse: channels - distilled,
        cca_squeeze,
        leaky_slope,
        scale,
        use_cca: flags & 1 != 0,
        use_iic: flags & 2 != 0,
        prm_variant: match prm {
            0 => PrmVariant::Prm,
            1 => PrmVariant::Plain3Conv,
            other => return Err(ModelError::Format(format!("unknown prm variant {other}"))),
        },
    };
    let mut model = match arch {
        0 => build_imdn(config)?,
        1 => build_imdn_as(config)?,
        other => return Err(ModelError::Format(format!("unknown arch {other}"))),
    };

    let mut filled: HashMap<String, bool> = HashMap::new();
    for _ in 0..record_count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Format("non-utf8 record name".into()))?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }

        let (layer_name, is_weight) = match name.strip_suffix(".weight") {
            Some(stem) => (stem.to_string(), true),
            None => match name.strip_suffix(".bias") {
                Some(stem) => (stem.to_string(), false),
                None => return Err(ModelError::Format(format!("bad record name '{name}'"))),
            },
        };
        let layer = model.layer_mut(&layer_name)?;
        if is_weight {
            let expect = layer.weights.shape();
            if dims.as_slice() != expect {
                return Err(ModelError::Format(format!(
                    "weight shape {dims:?} for '{layer_name}' does not match {expect:?}"
                )));
            }
            layer.weights = Tensor::from_vec(expect, data);
        } else {
            if dims.as_slice() != [layer.bias.len()] {
                return Err(ModelError::Format(format!(
                    "bias shape {dims:?} for '{layer_name}' does not match [{}]",
                    layer.bias.len()
                )));
            }
            layer.bias = data;
        }
        *filled.entry(name.clone()).or_insert(false) |= true;
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Format("trailing bytes after last record".into()));
    }
    for slot in model.slots() {
        for suffix in [".weight", ".bias"] {
            let key = format!("{}{}", slot.name, suffix);
            if !filled.contains_key(&key) {
                return Err(ModelError::Format(format!("missing record '{key}'")));
            }
        }
    }
    Ok(model)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// Needed because `Read`/`Write` are imported for the public save/load
// signatures' future-proofing; keep the imports honest.
#[allow(unused)]
fn _assert_io_traits<T: Read + Write>() {}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64, shape: [usize; 4]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn imdn_forward_shape_chain() {
        let mut m = build_imdn(ImdnConfig::tiny(2, 16, 4)).unwrap();
        init_weights(&mut m, 0);
        let out = m.forward(&random_input(1, [1, 3, 24, 24])).unwrap();
        assert_eq!(out.shape(), [1, 3, 96, 96]);
    }

    #[test]
    fn full_imdn_prm_shapes() {
        let mut m = build_imdn(ImdnConfig::with_scale(4)).unwrap();
        init_weights(&mut m, 7);
        let out = m.forward(&random_input(2, [1, 3, 8, 8])).unwrap();
        assert_eq!(out.shape(), [1, 3, 32, 32]);
    }

    #[test]
    fn zero_weight_block_is_identity() {
        // with all conv weights zero the block body is zero and the residual
        // connection passes the input through
        let cfg = ImdnConfig::tiny(1, 8, 2);
        let m = build_imdn(cfg).unwrap();
        let x = random_input(3, [1, 8, 5, 5]);
        let mut ctx = EvalCtx { model: &m };
        let y = forward_block(&m, &mut ctx, 1, &x.clone()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn prm_refined_part_ordering() {
        // zeroing c4 zeroes exactly the last distilled group of the concat
        let mut m = build_imdn(ImdnConfig::with_scale(2)).unwrap();
        init_weights(&mut m, 5);
        let x = random_input(4, [1, 64, 6, 6]);

        let forward_distilled = |model: &ModelGraph| -> Tensor {
            let mut ctx = EvalCtx { model };
            let cfg = &model.config;
            let c1 = conv_act(model, &mut ctx, "block1.c1", &x).unwrap();
            let (r1, co1) = c1.channel_split(cfg.distilled).unwrap();
            let c2 = conv_act(model, &mut ctx, "block1.c2", &co1).unwrap();
            let (r2, co2) = c2.channel_split(cfg.distilled).unwrap();
            let c3 = conv_act(model, &mut ctx, "block1.c3", &co2).unwrap();
            let (r3, co3) = c3.channel_split(cfg.distilled).unwrap();
            let r4 = conv_act(model, &mut ctx, "block1.c4", &co3).unwrap();
            Tensor::concat_channels(&[&r1, &r2, &r3, &r4]).unwrap()
        };

        let before = forward_distilled(&m);
        let layer = m.layer_mut("block1.c4").unwrap();
        layer.weights.data_mut().fill(0.0);
        layer.bias.fill(0.0);
        let after = forward_distilled(&m);

        for c in 0..48 {
            assert_eq!(before.plane(0, c), after.plane(0, c), "channel {c} changed");
        }
        for c in 48..64 {
            assert!(after.plane(0, c).iter().all(|&v| v == 0.0), "channel {c} not zeroed");
        }
    }

    #[test]
    fn cca_zero_input_propagates_zero() {
        let m = build_imdn(ImdnConfig::with_scale(2)).unwrap();
        // zero weights, zero biases: pooled z = 0, squeeze path bias = 0,
        // gates = sigmoid(0) = 0.5, output = x * 0.5 = 0 for zero x
        let x = Tensor::zeros(1, 64, 4, 4);
        let mut ctx = EvalCtx { model: &m };
        let y = forward_cca_in(&m, &mut ctx, 1, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cca_bias_only_probe_scales_by_sigmoid_of_bias() {
        let mut m = build_imdn(ImdnConfig::with_scale(2)).unwrap();
        let b = 0.7;
        m.layer_mut("block1.cca_up").unwrap().bias.fill(b);
        let x = random_input(6, [1, 64, 4, 4]);
        let mut ctx = EvalCtx { model: &m };
        let y = forward_cca_in(&m, &mut ctx, 1, &x).unwrap();
        let gate = 1.0 / (1.0 + (-b as f64).exp());
        for (yo, xo) in y.data().iter().zip(x.data()) {
            assert!((yo - gate * xo).abs() < 1e-15);
        }
    }

    #[test]
    fn imdn_as_same_size_contract() {
        let mut m = build_imdn_as(ImdnConfig::tiny(1, 8, 1)).unwrap();
        init_weights(&mut m, 9);
        let out = m.forward(&random_input(8, [1, 3, 64, 64])).unwrap();
        assert_eq!(out.shape(), [1, 3, 64, 64]);
        let out = m.forward(&random_input(9, [1, 3, 52, 52])).unwrap();
        assert_eq!(out.shape(), [1, 3, 52, 52]);
    }

    #[test]
    fn imdn_as_rejects_indivisible_input() {
        let mut m = build_imdn_as(ImdnConfig::tiny(1, 8, 1)).unwrap();
        init_weights(&mut m, 9);
        let err = m.forward(&random_input(10, [1, 3, 50, 52])).unwrap_err();
        assert!(matches!(err, ModelError::InputNotDivisible { h: 50, w: 52 }));
    }

    #[test]
    fn ablation_variants_upscale() {
        for variant in [
            AblationVariant::Plain3ConvB4,
            AblationVariant::BasicB4,
            AblationVariant::BasicB4Cca,
            AblationVariant::B4CcaIic,
        ] {
            let mut m = build_ablation(variant, 3).unwrap();
            init_weights(&mut m, 11);
            let out = m.forward(&random_input(11, [1, 3, 6, 6])).unwrap();
            assert_eq!(out.shape(), [1, 3, 18, 18], "{variant:?}");
        }
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!(
            AblationVariant::parse("basic-B4").unwrap(),
            AblationVariant::BasicB4
        );
        assert_eq!(
            AblationVariant::parse("basic-B4+CCA").unwrap(),
            AblationVariant::BasicB4Cca
        );
        assert_eq!(AblationVariant::parse("B4").unwrap(), AblationVariant::B4CcaIic);
        assert_eq!(
            AblationVariant::parse("plain-3conv-B4").unwrap(),
            AblationVariant::Plain3ConvB4
        );
        assert!(AblationVariant::parse("nope").is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let mut a = build_imdn(ImdnConfig::tiny(2, 16, 2)).unwrap();
        let mut b = build_imdn(ImdnConfig::tiny(2, 16, 2)).unwrap();
        init_weights(&mut a, 42);
        init_weights(&mut b, 42);
        for (sa, sb) in a.slots().iter().zip(b.slots()) {
            assert_eq!(sa.layer.weights, sb.layer.weights);
        }
        init_weights(&mut b, 43);
        let differs = a
            .slots()
            .iter()
            .zip(b.slots())
            .any(|(sa, sb)| sa.layer.weights != sb.layer.weights);
        assert!(differs);
    }

    #[test]
    fn init_keeps_activations_in_sane_range() {
        let mut m = build_imdn(ImdnConfig::with_scale(2)).unwrap();
        init_weights(&mut m, 123);
        let x = random_input(123, [1, 3, 16, 16]).map(|v| v * 2.0 - 1.0);
        let mut ctx = EvalCtx { model: &m };
        let mut h = conv_act(&m, &mut ctx, "fea_conv", &x).unwrap();
        for b in 1..=m.config.num_blocks {
            h = forward_block(&m, &mut ctx, b, &h).unwrap();
            let std = {
                let mean = h.sum() / h.numel() as f64;
                (h.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / h.numel() as f64)
                    .sqrt()
            };
            assert!(std > 0.1 && std < 10.0, "block {b} std {std}");
        }
    }

    #[test]
    fn save_load_roundtrip_bytes_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.imdnw");
        let p2 = dir.path().join("b.imdnw");
        let mut m = build_imdn(ImdnConfig::tiny(2, 16, 2)).unwrap();
        init_weights(&mut m, 77);
        save_weights(&m, &p1).unwrap();
        let loaded = load_weights(&p1).unwrap();
        save_weights(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let x = random_input(7, [1, 3, 12, 12]);
        let y1 = m.forward(&x).unwrap();
        let y2 = loaded.forward(&x).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn load_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.imdnw");
        let mut m = build_imdn(ImdnConfig::tiny(1, 8, 2)).unwrap();
        init_weights(&mut m, 1);
        save_weights(&m, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() / 2];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(load_weights(&path), Err(ModelError::Format(_))));

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        assert!(matches!(load_weights(&path), Err(ModelError::Format(_))));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut m = build_imdn(ImdnConfig::tiny(2, 16, 2)).unwrap();
        init_weights(&mut m, 13);
        let x = random_input(13, [1, 3, 10, 10]);
        let plain = m.forward(&x).unwrap();

        let mut tape = Tape::new();
        let params = m.register_params(&mut tape);
        let out = m.forward_on_tape(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(out), &plain);
    }

    #[test]
    fn config_validation_catches_bad_splits() {
        let mut cfg = ImdnConfig::default();
        cfg.distilled = 20;
        assert!(build_imdn(cfg).is_err());
        let mut cfg = ImdnConfig::default();
        cfg.cca_squeeze = 5;
        assert!(build_imdn(cfg).is_err());
        let mut cfg = ImdnConfig::default();
        cfg.scale = 9;
        assert!(build_imdn(cfg).is_err());
    }
}
