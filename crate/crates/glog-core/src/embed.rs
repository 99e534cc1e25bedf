//! Convolutional patch embedding over the filter-bank responses.
//!
//! The input image is concatenated with every bank response channel and
//! pushed through a stack of strided 3x3 convolutions, each followed by
//! GELU and channel layer norm. The stride product equals the patch size,
//! so an `[1, h, w]` image becomes an `[embed_dim, h/patch, w/patch]`
//! token grid. The whole path runs on the tape, so gradients reach both
//! the conv weights and (through the kernel leaves) the filter-bank
//! parameters.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{uniform_tensor, xavier_bound, LN_EPS};
use crate::scalar::{cast, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Patch-embedding configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    /// Spatial downsampling factor from image to token grid.
    pub patch_size: usize,
    /// Channels of the embedded tokens.
    pub embed_dim: usize,
    /// `(out_channels, stride)` per conv stage; stride product must equal
    /// `patch_size` and the last stage must produce `embed_dim` channels.
    pub conv_stack: Vec<(usize, usize)>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self::new(4, 48)
    }
}

impl EmbedConfig {
    /// Two stride-2 stages widening to `embed_dim`.
    pub fn new(patch_size: usize, embed_dim: usize) -> Self {
        Self {
            patch_size,
            embed_dim,
            conv_stack: vec![(embed_dim / 2, 2), (embed_dim, 2)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_stack.is_empty() {
            return Err(Error::Constraint("embed conv_stack is empty".to_string()));
        }
        let stride_product: usize = self.conv_stack.iter().map(|&(_, s)| s).product();
        if stride_product != self.patch_size {
            return Err(Error::Constraint(format!(
                "embed stride product {stride_product} != patch_size {}",
                self.patch_size
            )));
        }
        let last = self.conv_stack.last().unwrap().0;
        if last != self.embed_dim {
            return Err(Error::Constraint(format!(
                "embed final stage channels {last} != embed_dim {}",
                self.embed_dim
            )));
        }
        if self.conv_stack.iter().any(|&(c, s)| c == 0 || s == 0) {
            return Err(Error::Constraint(
                "embed stages need nonzero channels and stride".to_string(),
            ));
        }
        Ok(())
    }
}

/// One strided conv stage: 3x3 kernels, per-channel bias, LN affine.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage<T: Scalar> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
    pub stride: usize,
}

/// Weights of the full embedding stack.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedWeights<T: Scalar> {
    pub stages: Vec<ConvStage<T>>,
}

impl<T: Scalar> EmbedWeights<T> {
    /// Initialize for `in_channels` input channels (image + bank outputs).
    pub fn init(cfg: &EmbedConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.conv_stack.len());
        let mut cin = in_channels;
        for &(cout, stride) in &cfg.conv_stack {
            let bound = xavier_bound(cin * 9, cout * 9);
            stages.push(ConvStage {
                kernels: uniform_tensor(rng, vec![cout, cin, 3, 3], bound),
                bias: Tensor::zeros(vec![cout]),
                ln_gain: Tensor::full(vec![cout], T::one()),
                ln_bias: Tensor::zeros(vec![cout]),
                stride,
            });
            cin = cout;
        }
        Ok(Self { stages })
    }

    pub fn for_each(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            f(format!("embed{i}.kernels"), &s.kernels);
            f(format!("embed{i}.bias"), &s.bias);
            f(format!("embed{i}.ln_gain"), &s.ln_gain);
            f(format!("embed{i}.ln_bias"), &s.ln_bias);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(format!("embed{i}.kernels"), &mut s.kernels);
            f(format!("embed{i}.bias"), &mut s.bias);
            f(format!("embed{i}.ln_gain"), &mut s.ln_gain);
            f(format!("embed{i}.ln_bias"), &mut s.ln_bias);
        }
    }

    pub fn insert(&self, tape: &mut Tape<T>) -> EmbedNodes {
        EmbedNodes {
            stages: self
                .stages
                .iter()
                .map(|s| ConvStageNodes {
                    kernels: tape.leaf(s.kernels.clone()),
                    bias: tape.leaf(s.bias.clone()),
                    ln_gain: tape.leaf(s.ln_gain.clone()),
                    ln_bias: tape.leaf(s.ln_bias.clone()),
                    stride: s.stride,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvStageNodes {
    pub kernels: NodeId,
    pub bias: NodeId,
    pub ln_gain: NodeId,
    pub ln_bias: NodeId,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct EmbedNodes {
    pub stages: Vec<ConvStageNodes>,
}

impl EmbedNodes {
    pub fn for_each(&self, f: &mut impl FnMut(NodeId)) {
        for s in &self.stages {
            f(s.kernels);
            f(s.bias);
            f(s.ln_gain);
            f(s.ln_bias);
        }
    }
}

/// Run the embedding on the tape: concatenate the image with the bank
/// responses (obtained by convolving with the kernel leaf `bank_kernels`,
/// when present), then the strided conv / GELU / LN stages.
pub fn embed_forward_on<T: Scalar>(
    tape: &mut Tape<T>,
    image: NodeId,
    bank_kernels: Option<NodeId>,
    nodes: &EmbedNodes,
    cfg: &EmbedConfig,
) -> Result<NodeId> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "embedding expects a single-channel image [1,h,w], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
        return Err(Error::Constraint(format!(
            "image {h}x{w} not divisible by patch_size {}",
            cfg.patch_size
        )));
    }

    let mut x = match bank_kernels {
        Some(kernels) => {
            let responses = tape.conv2d(image, kernels)?;
            tape.concat_channels(&[image, responses])?
        }
        None => image,
    };
    for stage in &nodes.stages {
        x = tape.conv2d_general(x, stage.kernels, stage.stride, 1)?;
        x = tape.add_channel_bias(x, stage.bias)?;
        x = tape.gelu(x);
        x = tape.layer_norm(x, stage.ln_gain, stage.ln_bias, cast::<T>(LN_EPS))?;
    }
    Ok(x)
}

/// Convenience wrapper: build a fresh tape, run the embedding, return the
/// embedded tokens as a plain tensor.
pub fn embed_forward<T: Scalar>(
    image: &Tensor<T>,
    bank: &crate::filters::FilterBank<T>,
    weights: &EmbedWeights<T>,
    cfg: &EmbedConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let image_node = tape.leaf(image.clone());
    let kernels = if bank.filter_count() > 0 {
        Some(tape.leaf(bank.stacked_kernels()))
    } else {
        None
    };
    let nodes = weights.insert(&mut tape);
    let out = embed_forward_on(&mut tape, image_node, kernels, &nodes, cfg)?;
    Ok(tape.value(out).clone())
}

/// Number of input channels the first embed conv sees for a bank with
/// `filters` outputs: the raw image plus one channel per filter.
pub fn embed_in_channels(filters: usize) -> usize {
    1 + filters
}
