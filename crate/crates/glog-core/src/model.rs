//! U-shaped encoder/decoder of window-attention + convolution blocks.
//!
//! The layout is the smallest shape that still exercises the full
//! mechanism: patch embedding, two encoder stages with patch merging, a
//! bottleneck, a mirrored decoder with skip concatenation, and a
//! per-pixel class head. Every stage runs blocks of
//! layer norm -> window attention (+residual) -> layer norm ->
//! 3x3 conv + GELU + pointwise conv (+residual), with the attention
//! windows cyclically shifted by half a window on alternating blocks
//! (no attention masking; at this scale wrap-around mixing is accepted).
//!
//! Channel widths double and the token grid halves at each encoder stage;
//! the decoder inverts this exactly, checking shapes at every boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{embed_forward_on, embed_in_channels, EmbedConfig, EmbedNodes, EmbedWeights};
use crate::error::{Error, Result};
use crate::filters::{self, BankConfig, FilterBank};
use crate::scalar::{cast, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Layer-norm epsilon used across the model.
pub const LN_EPS: f64 = 1e-5;

/// Shape of one attention/conv block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Tokens per window side.
    pub window: usize,
    /// Attention heads.
    pub heads: usize,
    /// Token channels.
    pub dim: usize,
    /// Cyclic half-window shift before windowing.
    pub shift: bool,
}

/// Model-level hyperparameters (everything except the filter bank).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub embed: EmbedConfig,
    pub window: usize,
    pub heads: usize,
    /// Blocks per encoder/decoder stage and in the bottleneck.
    pub blocks_per_stage: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            embed: EmbedConfig::default(),
            window: 4,
            heads: 2,
            blocks_per_stage: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        if self.n_classes < 2 || self.n_classes > 256 {
            return Err(Error::Constraint(format!(
                "n_classes must be in 2..=256, got {}",
                self.n_classes
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Constraint("blocks_per_stage must be >= 1".to_string()));
        }
        for (stage, dim) in [
            ("stage 1", self.embed.embed_dim),
            ("stage 2", 2 * self.embed.embed_dim),
            ("bottleneck", 4 * self.embed.embed_dim),
        ] {
            if dim % self.heads != 0 {
                return Err(Error::Constraint(format!(
                    "{stage} dim {dim} not divisible by heads {}",
                    self.heads
                )));
            }
        }
        if !self.embed.patch_size.is_power_of_two() {
            return Err(Error::Constraint(format!(
                "patch_size {} must be a power of two for the head upsampling",
                self.embed.patch_size
            )));
        }
        Ok(())
    }

    /// Check an image extent against every grid constraint, naming the
    /// first violated one.
    pub fn validate_image(&self, h: usize, w: usize) -> Result<()> {
        if h != w {
            return Err(Error::Constraint(format!(
                "image must be square, got {h}x{w}"
            )));
        }
        if !h.is_multiple_of(self.embed.patch_size) {
            return Err(Error::Constraint(format!(
                "image side {h} not divisible by patch_size {}",
                self.embed.patch_size
            )));
        }
        let grid = h / self.embed.patch_size;
        for (stage, div) in [("stage 1", 1), ("stage 2", 2), ("bottleneck", 4)] {
            if !grid.is_multiple_of(div) || !(grid / div).is_multiple_of(self.window) {
                return Err(Error::Constraint(format!(
                    "{stage} token grid {} not divisible by window {}",
                    grid / div,
                    self.window
                )));
            }
        }
        Ok(())
    }
}

/// Weights of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T: Scalar> {
    pub cfg: BlockConfig,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub conv3: Tensor<T>,
    pub conv3_bias: Tensor<T>,
    pub conv1: Tensor<T>,
    pub conv1_bias: Tensor<T>,
}

impl<T: Scalar> BlockWeights<T> {
    fn init(cfg: BlockConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let lin = xavier_bound(d, d);
        let c3 = xavier_bound(d * 9, d * 9);
        let c1 = xavier_bound(d, d);
        Self {
            cfg,
            ln1_gain: Tensor::full(vec![d], T::one()),
            ln1_bias: Tensor::zeros(vec![d]),
            wq: uniform_tensor(rng, vec![d, d], lin),
            bq: Tensor::zeros(vec![d]),
            wk: uniform_tensor(rng, vec![d, d], lin),
            bk: Tensor::zeros(vec![d]),
            wv: uniform_tensor(rng, vec![d, d], lin),
            bv: Tensor::zeros(vec![d]),
            wo: uniform_tensor(rng, vec![d, d], lin),
            bo: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::full(vec![d], T::one()),
            ln2_bias: Tensor::zeros(vec![d]),
            conv3: uniform_tensor(rng, vec![d, d, 3, 3], c3),
            conv3_bias: Tensor::zeros(vec![d]),
            conv1: uniform_tensor(rng, vec![d, d, 1, 1], c1),
            conv1_bias: Tensor::zeros(vec![d]),
        }
    }

    fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        for (name, t) in self.named() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        let prefix = prefix.to_string();
        for (name, t) in self.named_mut() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("conv3", &self.conv3),
            ("conv3_bias", &self.conv3_bias),
            ("conv1", &self.conv1),
            ("conv1_bias", &self.conv1_bias),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 16] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("conv3", &mut self.conv3),
            ("conv3_bias", &mut self.conv3_bias),
            ("conv1", &mut self.conv1),
            ("conv1_bias", &mut self.conv1_bias),
        ]
    }

    fn insert(&self, tape: &mut Tape<T>) -> BlockNodes {
        BlockNodes {
            cfg: self.cfg,
            ids: self.named().map(|(_, t)| tape.leaf(t.clone())),
        }
    }
}

/// Tape leaves of one block, in [`BlockWeights::named`] order.
#[derive(Debug, Clone)]
pub struct BlockNodes {
    cfg: BlockConfig,
    ids: [NodeId; 16],
}

impl BlockNodes {
    fn get(&self, i: usize) -> NodeId {
        self.ids[i]
    }

    fn for_each(&self, f: &mut impl FnMut(NodeId)) {
        for id in self.ids {
            f(id);
        }
    }
}

/// A conv used for merging, expanding or the class head.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T: Scalar> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvWeights<T> {
    fn init(cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = xavier_bound(cin * k * k, cout * k * k);
        Self {
            kernels: uniform_tensor(rng, vec![cout, cin, k, k], bound),
            bias: Tensor::zeros(vec![cout]),
        }
    }

    fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.kernels"), &self.kernels);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.kernels"), &mut self.kernels);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    fn insert(&self, tape: &mut Tape<T>) -> ConvNodes {
        ConvNodes {
            kernels: tape.leaf(self.kernels.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvNodes {
    kernels: NodeId,
    bias: NodeId,
}

/// Full model state: configuration, filter bank and every weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Scalar> {
    pub config: ModelConfig,
    pub bank_config: BankConfig,
    pub seed: u64,
    pub bank: FilterBank<T>,
    pub embed: EmbedWeights<T>,
    pub enc1: Vec<BlockWeights<T>>,
    pub merge1: ConvWeights<T>,
    pub enc2: Vec<BlockWeights<T>>,
    pub merge2: ConvWeights<T>,
    pub bottleneck: Vec<BlockWeights<T>>,
    pub up2: ConvWeights<T>,
    pub fuse2: ConvWeights<T>,
    pub dec2: Vec<BlockWeights<T>>,
    pub up1: ConvWeights<T>,
    pub fuse1: ConvWeights<T>,
    pub dec1: Vec<BlockWeights<T>>,
    pub head: ConvWeights<T>,
}

fn stage_blocks<T: Scalar>(
    cfg: &ModelConfig,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<BlockWeights<T>> {
    (0..cfg.blocks_per_stage)
        .map(|i| {
            BlockWeights::init(
                BlockConfig {
                    window: cfg.window,
                    heads: cfg.heads,
                    dim,
                    shift: i % 2 == 1,
                },
                rng,
            )
        })
        .collect()
}

/// Deterministic model initialization: scaled-uniform conv/attention
/// weights from a seeded generator, zero biases, unit layer-norm gains,
/// and the deterministic filter-bank scheme.
pub fn model_init<T: Scalar>(
    config: ModelConfig,
    bank_config: BankConfig,
    seed: u64,
) -> Result<ModelWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = filters::init_bank::<T>(
        bank_config.n_gabor,
        bank_config.n_log,
        bank_config.kernel_size,
        seed,
    )?;
    let d = config.embed.embed_dim;
    let embed = EmbedWeights::init(
        &config.embed,
        embed_in_channels(bank.filter_count()),
        &mut rng,
    )?;
    // Alternate shift parity across stages as well as within them, so
    // shifted windows are exercised even with one block per stage.
    let enc1 = stage_blocks(&config, d, &mut rng);
    let merge1 = ConvWeights::init(2 * d, d, 2, &mut rng);
    let mut enc2 = stage_blocks(&config, 2 * d, &mut rng);
    let merge2 = ConvWeights::init(4 * d, 2 * d, 2, &mut rng);
    let bottleneck = stage_blocks(&config, 4 * d, &mut rng);
    let up2 = ConvWeights::init(2 * d, 4 * d, 1, &mut rng);
    let fuse2 = ConvWeights::init(2 * d, 4 * d, 1, &mut rng);
    let mut dec2 = stage_blocks(&config, 2 * d, &mut rng);
    let up1 = ConvWeights::init(d, 2 * d, 1, &mut rng);
    let fuse1 = ConvWeights::init(d, 2 * d, 1, &mut rng);
    let dec1 = stage_blocks(&config, d, &mut rng);
    let head = ConvWeights::init(config.n_classes, d, 1, &mut rng);
    if config.blocks_per_stage == 1 {
        for block in enc2.iter_mut().chain(dec2.iter_mut()) {
            block.cfg.shift = true;
        }
    }
    Ok(ModelWeights {
        config,
        bank_config,
        seed,
        bank,
        embed,
        enc1,
        merge1,
        enc2,
        merge2,
        bottleneck,
        up2,
        fuse2,
        dec2,
        up1,
        fuse1,
        dec1,
        head,
    })
}

impl<T: Scalar> ModelWeights<T> {
    /// Visit every weight tensor (excluding the bank parameters) in the
    /// canonical traversal order used by the optimizer and checkpoints.
    pub fn for_each_tensor(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.embed.for_each(f);
        for (blocks, name) in [
            (&self.enc1, "enc1"),
            (&self.enc2, "enc2"),
            (&self.bottleneck, "bottleneck"),
            (&self.dec2, "dec2"),
            (&self.dec1, "dec1"),
        ] {
            for (i, b) in blocks.iter().enumerate() {
                b.for_each(&format!("{name}.block{i}"), f);
            }
        }
        self.merge1.for_each("merge1", f);
        self.merge2.for_each("merge2", f);
        self.up2.for_each("up2", f);
        self.fuse2.for_each("fuse2", f);
        self.up1.for_each("up1", f);
        self.fuse1.for_each("fuse1", f);
        self.head.for_each("head", f);
    }

    /// Mutable counterpart of [`ModelWeights::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.embed.for_each_mut(f);
        for (blocks, name) in [
            (&mut self.enc1, "enc1"),
            (&mut self.enc2, "enc2"),
            (&mut self.bottleneck, "bottleneck"),
            (&mut self.dec2, "dec2"),
            (&mut self.dec1, "dec1"),
        ] {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.for_each_mut(&format!("{name}.block{i}"), f);
            }
        }
        self.merge1.for_each_mut("merge1", f);
        self.merge2.for_each_mut("merge2", f);
        self.up2.for_each_mut("up2", f);
        self.fuse2.for_each_mut("fuse2", f);
        self.up1.for_each_mut("up1", f);
        self.fuse1.for_each_mut("fuse1", f);
        self.head.for_each_mut("head", f);
    }

    /// Learnable scalar count: weight tensors plus the bank parameters.
    pub fn total_param_count(&self) -> usize {
        let mut n = self.bank.learnable_param_count();
        self.for_each_tensor(&mut |_, t| n += t.numel());
        n
    }

    /// Insert every weight (and the generated filter kernels) as tape
    /// leaves.
    pub fn insert(&self, tape: &mut Tape<T>) -> ModelNodes {
        let bank_kernels = if self.bank.filter_count() > 0 {
            Some(tape.leaf(self.bank.stacked_kernels()))
        } else {
            None
        };
        ModelNodes {
            bank_kernels,
            embed: self.embed.insert(tape),
            enc1: self.enc1.iter().map(|b| b.insert(tape)).collect(),
            merge1: self.merge1.insert(tape),
            enc2: self.enc2.iter().map(|b| b.insert(tape)).collect(),
            merge2: self.merge2.insert(tape),
            bottleneck: self.bottleneck.iter().map(|b| b.insert(tape)).collect(),
            up2: self.up2.insert(tape),
            fuse2: self.fuse2.insert(tape),
            dec2: self.dec2.iter().map(|b| b.insert(tape)).collect(),
            up1: self.up1.insert(tape),
            fuse1: self.fuse1.insert(tape),
            dec1: self.dec1.iter().map(|b| b.insert(tape)).collect(),
            head: self.head.insert(tape),
        }
    }

    /// Full forward pass on an existing tape; returns the logits node.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        nodes: &ModelNodes,
        image: &Tensor<T>,
    ) -> Result<NodeId> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "model expects a single-channel image [1,h,w], got {shape:?}"
            )));
        }
        self.config.validate_image(shape[1], shape[2])?;
        let d = self.config.embed.embed_dim;
        let grid = shape[1] / self.config.embed.patch_size;

        let image_node = tape.leaf(image.clone());
        let mut x = embed_forward_on(
            tape,
            image_node,
            nodes.bank_kernels,
            &nodes.embed,
            &self.config.embed,
        )?;
        expect_shape(tape, x, &[d, grid, grid], "after embedding")?;

        for block in &nodes.enc1 {
            x = block_forward(tape, x, block)?;
        }
        let skip1 = x;
        x = merge_down(tape, x, nodes.merge1)?;
        expect_shape(tape, x, &[2 * d, grid / 2, grid / 2], "after merge 1")?;

        for block in &nodes.enc2 {
            x = block_forward(tape, x, block)?;
        }
        let skip2 = x;
        x = merge_down(tape, x, nodes.merge2)?;
        expect_shape(tape, x, &[4 * d, grid / 4, grid / 4], "after merge 2")?;

        for block in &nodes.bottleneck {
            x = block_forward(tape, x, block)?;
        }

        x = expand_up(tape, x, nodes.up2)?;
        expect_shape(tape, x, &[2 * d, grid / 2, grid / 2], "after expand 2")?;
        x = tape.concat_channels(&[x, skip2])?;
        x = pointwise(tape, x, nodes.fuse2)?;
        for block in &nodes.dec2 {
            x = block_forward(tape, x, block)?;
        }

        x = expand_up(tape, x, nodes.up1)?;
        expect_shape(tape, x, &[d, grid, grid], "after expand 1")?;
        x = tape.concat_channels(&[x, skip1])?;
        x = pointwise(tape, x, nodes.fuse1)?;
        for block in &nodes.dec1 {
            x = block_forward(tape, x, block)?;
        }

        let mut logits = pointwise(tape, x, nodes.head)?;
        let mut scale = self.config.embed.patch_size;
        while scale > 1 {
            logits = tape.upsample_nearest2(logits)?;
            scale /= 2;
        }
        expect_shape(
            tape,
            logits,
            &[self.config.n_classes, shape[1], shape[2]],
            "at the pixel head",
        )?;
        Ok(logits)
    }

    /// Inference convenience: fresh tape, forward, return logits.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let nodes = self.insert(&mut tape);
        let logits = self.forward_on(&mut tape, &nodes, image)?;
        Ok(tape.value(logits).clone())
    }

    /// Gradients for every parameter group after `backward`, aligned as
    /// `[bank raw params] ++ tensors in traversal order`.
    pub fn collect_grads(&self, tape: &Tape<T>, nodes: &ModelNodes) -> Result<Vec<Vec<T>>> {
        let mut grads = Vec::new();
        let bank_grads = match nodes.bank_kernels {
            Some(id) => {
                let kernel_grads = tape.grad(id).ok_or_else(|| {
                    Error::InvalidArgument("backward has not run on this tape".to_string())
                })?;
                filters::param_grads_from_kernel_grads(kernel_grads, &self.bank)?
            }
            None => Vec::new(),
        };
        grads.push(bank_grads);
        let mut missing = false;
        nodes.for_each_tensor(&mut |id| match tape.grad(id) {
            Some(g) => grads.push(g.to_vec()),
            None => missing = true,
        });
        if missing {
            return Err(Error::InvalidArgument(
                "backward has not run on this tape".to_string(),
            ));
        }
        Ok(grads)
    }

    /// Parameter group names aligned with [`ModelWeights::collect_grads`].
    pub fn param_group_names(&self) -> Vec<String> {
        let mut names = vec!["bank".to_string()];
        self.for_each_tensor(&mut |name, _| names.push(name));
        names
    }
}

/// Tape leaves of the whole model.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub bank_kernels: Option<NodeId>,
    embed: EmbedNodes,
    enc1: Vec<BlockNodes>,
    merge1: ConvNodes,
    enc2: Vec<BlockNodes>,
    merge2: ConvNodes,
    bottleneck: Vec<BlockNodes>,
    up2: ConvNodes,
    fuse2: ConvNodes,
    dec2: Vec<BlockNodes>,
    up1: ConvNodes,
    fuse1: ConvNodes,
    dec1: Vec<BlockNodes>,
    head: ConvNodes,
}

impl ModelNodes {
    /// Every weight leaf in the same order as
    /// [`ModelWeights::for_each_tensor`].
    fn for_each_tensor(&self, f: &mut impl FnMut(NodeId)) {
        self.embed.for_each(f);
        for blocks in [&self.enc1, &self.enc2, &self.bottleneck, &self.dec2, &self.dec1] {
            for b in blocks {
                b.for_each(f);
            }
        }
        for conv in [
            self.merge1,
            self.merge2,
            self.up2,
            self.fuse2,
            self.up1,
            self.fuse1,
            self.head,
        ] {
            f(conv.kernels);
            f(conv.bias);
        }
    }
}

/// Window-restricted multi-head self-attention over a `[dim, ht, wt]`
/// token map. Softmax rows sum to one within each window; with
/// `cfg.shift` the token map is cyclically rolled by half a window first
/// and unrolled after.
pub fn window_attention_on<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    nodes: &BlockNodes,
) -> Result<NodeId> {
    let cfg = nodes.cfg;
    let shape = tape.value(x).shape().to_vec();
    let (dim, ht, wt) = (shape[0], shape[1], shape[2]);
    if dim != cfg.dim {
        return Err(Error::ShapeMismatch(format!(
            "attention dim {dim} != configured {}",
            cfg.dim
        )));
    }
    if ht % cfg.window != 0 || wt % cfg.window != 0 {
        return Err(Error::Constraint(format!(
            "token grid {ht}x{wt} not divisible by window {}",
            cfg.window
        )));
    }
    let head_dim = dim / cfg.heads;
    let area = cfg.window * cfg.window;
    let shift = if cfg.shift { (cfg.window / 2) as i64 } else { 0 };

    let shifted = if shift != 0 {
        tape.cyclic_shift(x, shift, shift)?
    } else {
        x
    };
    let tokens = tape.window_partition(shifted, cfg.window)?;

    let q = tape.linear(tokens, nodes.get(2), nodes.get(3))?;
    let k = tape.linear(tokens, nodes.get(4), nodes.get(5))?;
    let v = tape.linear(tokens, nodes.get(6), nodes.get(7))?;

    let scale = cast::<T>(1.0 / (head_dim as f64).sqrt());
    let n_windows = (ht / cfg.window) * (wt / cfg.window);
    let mut window_outs = Vec::with_capacity(n_windows);
    for wi in 0..n_windows {
        let qw = tape.slice_rows(q, wi * area, area)?;
        let kw = tape.slice_rows(k, wi * area, area)?;
        let vw = tape.slice_rows(v, wi * area, area)?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(qw, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(kw, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(vw, h * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        window_outs.push(tape.concat_cols(&head_outs)?);
    }
    let merged = tape.concat_rows(&window_outs)?;
    let projected = tape.linear(merged, nodes.get(8), nodes.get(9))?;
    let spatial = tape.window_unpartition(projected, cfg.window, ht, wt)?;
    if shift != 0 {
        tape.cyclic_shift(spatial, -shift, -shift)
    } else {
        Ok(spatial)
    }
}

/// One block: LN -> window attention (+residual) -> LN -> 3x3 conv +
/// GELU + pointwise conv (+residual).
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    nodes: &BlockNodes,
) -> Result<NodeId> {
    let eps = cast::<T>(LN_EPS);
    let n1 = tape.layer_norm(x, nodes.get(0), nodes.get(1), eps)?;
    let attn = window_attention_on(tape, n1, nodes)?;
    let x = tape.add(x, attn)?;

    let n2 = tape.layer_norm(x, nodes.get(10), nodes.get(11), eps)?;
    let c = tape.conv2d(n2, nodes.get(12))?;
    let c = tape.add_channel_bias(c, nodes.get(13))?;
    let c = tape.gelu(c);
    let c = tape.conv2d(c, nodes.get(14))?;
    let c = tape.add_channel_bias(c, nodes.get(15))?;
    tape.add(x, c)
}

/// Patch merging: 2x2 stride-2 conv doubling the channels.
fn merge_down<T: Scalar>(tape: &mut Tape<T>, x: NodeId, conv: ConvNodes) -> Result<NodeId> {
    let merged = tape.conv2d_general(x, conv.kernels, 2, 0)?;
    tape.add_channel_bias(merged, conv.bias)
}

/// Patch expanding: nearest upsample then pointwise conv halving channels.
fn expand_up<T: Scalar>(tape: &mut Tape<T>, x: NodeId, conv: ConvNodes) -> Result<NodeId> {
    let up = tape.upsample_nearest2(x)?;
    pointwise(tape, up, conv)
}

fn pointwise<T: Scalar>(tape: &mut Tape<T>, x: NodeId, conv: ConvNodes) -> Result<NodeId> {
    let out = tape.conv2d(x, conv.kernels)?;
    tape.add_channel_bias(out, conv.bias)
}

fn expect_shape<T: Scalar>(
    tape: &Tape<T>,
    id: NodeId,
    expect: &[usize],
    at: &str,
) -> Result<()> {
    let got = tape.value(id).shape();
    if got != expect {
        return Err(Error::Constraint(format!(
            "shape {got:?} {at}, expected {expect:?}"
        )));
    }
    Ok(())
}

/// Xavier-style uniform bound.
pub(crate) fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Tensor with entries drawn uniformly from `[-bound, bound)`.
pub(crate) fn uniform_tensor<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    bound: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| cast::<T>(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("matching length")
}
