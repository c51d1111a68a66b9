//! The compact U-Net: a same-padded encoder/decoder with batch norm after
//! every 3x3 convolution, transposed-convolution upsampling and channel
//! concatenation of skip connections.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm2d_backward, batchnorm2d_eval, batchnorm2d_train, concat_channels, conv2d,
    conv2d_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, split_channels,
    upconv2d, upconv2d_backward, BatchNormCache, Mode, RunningStats, Tensor,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Width of the first encoder block; level `l` uses `base_features * 2^l`.
    pub base_features: usize,
    /// Number of pooling levels.
    pub depth: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 3,
            num_classes: 6,
            base_features: 8,
            depth: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |arg: &'static str, reason: &str| {
            Err(Error::InvalidArgument {
                arg,
                reason: reason.to_string(),
            })
        };
        if self.in_channels == 0 {
            return bad("in_channels", "must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "must be at least 2");
        }
        if self.base_features == 0 {
            return bad("base_features", "must be at least 1");
        }
        if self.depth == 0 || self.depth > 16 {
            return bad("depth", "must be between 1 and 16");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum", "must lie in [0, 1]");
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 {
            return bad("bn_eps", "must be positive");
        }
        Ok(())
    }

    /// Feature width at encoder level `level` (`depth` is the bottleneck).
    pub fn width(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::dims(format!(
                "input {height}x{width} not divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    kernel: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: ConvSlot,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    first: ConvBn,
    second: ConvBn,
}

#[derive(Debug, Clone, Copy)]
struct UpBlock {
    up: ConvSlot,
    block: DoubleConv,
}

/// Builds the parameter list in a fixed order while recording slot indices.
struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.names.push(name);
        self.params.push(tensor);
        self.params.len() - 1
    }

    /// He-normal kernel, zero bias.
    fn conv(&mut self, prefix: &str, dims: [usize; 4], fan_in: usize) -> ConvSlot {
        let std = (2.0 / fan_in as f64).sqrt();
        let bias_len = if prefix.ends_with(".up") { dims[1] } else { dims[0] };
        let kernel = Tensor::randn(&dims, std, self.rng);
        ConvSlot {
            kernel: self.push(format!("{prefix}.kernel"), kernel),
            bias: self.push(format!("{prefix}.bias"), Tensor::zeros(&[bias_len])),
        }
    }

    fn conv_bn(&mut self, prefix: &str, index: usize, cin: usize, cout: usize) -> ConvBn {
        let conv = self.conv(&format!("{prefix}.conv{index}"), [cout, cin, 3, 3], cin * 9);
        let gamma = self.push(format!("{prefix}.bn{index}.gamma"), Tensor::full(&[cout], 1.0));
        let beta = self.push(format!("{prefix}.bn{index}.beta"), Tensor::zeros(&[cout]));
        self.stat_names.push(format!("{prefix}.bn{index}"));
        self.stats.push(RunningStats::new(cout));
        ConvBn {
            conv,
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn double(&mut self, prefix: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv {
            first: self.conv_bn(prefix, 1, cin, cout),
            second: self.conv_bn(prefix, 2, cout, cout),
        }
    }
}

/// Segmentation network with its parameters and batch-norm running
/// statistics.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    /// Ordered deepest first.
    decoder: Vec<UpBlock>,
    head: ConvSlot,
}

struct ConvBnTape {
    input: Tensor,
    bn: BatchNormCache,
    pre_activation: Tensor,
}

struct DoubleTape {
    first: ConvBnTape,
    second: ConvBnTape,
}

struct EncoderTape {
    block: DoubleTape,
    block_out_dims: Vec<usize>,
    argmax: Vec<usize>,
}

struct DecoderTape {
    up_input: Tensor,
    skip_channels: usize,
    block: DoubleTape,
}

/// Intermediate values of a train-mode forward pass, consumed by
/// [`UNet::backward`] and [`UNet::commit_batch_stats`].
pub struct Tape {
    encoder: Vec<EncoderTape>,
    bottleneck: DoubleTape,
    decoder: Vec<DecoderTape>,
    head_input: Tensor,
}

/// Builds a U-Net with deterministic He-normal initialization.
pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<UNet> {
    UNet::new(config.clone(), seed)
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            names: Vec::new(),
            params: Vec::new(),
            stat_names: Vec::new(),
            stats: Vec::new(),
        };
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            let w = config.width(level);
            encoder.push(b.double(&format!("enc{level}"), cin, w));
            cin = w;
        }
        let bottleneck = b.double("bottleneck", cin, config.width(config.depth));
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let (wide, w) = (config.width(level + 1), config.width(level));
            let up = b.conv(&format!("dec{level}.up"), [wide, w, 2, 2], wide);
            let block = b.double(&format!("dec{level}"), 2 * w, w);
            decoder.push(UpBlock { up, block });
        }
        let head = b.conv(
            "head",
            [config.num_classes, config.width(0), 1, 1],
            config.width(0),
        );
        let Builder {
            names,
            params,
            stat_names,
            stats,
            ..
        } = b;
        Ok(UNet {
            config,
            names,
            params,
            stat_names,
            stats,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Batch-norm layer names, in the same order as [`UNet::running_stats`].
    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn stats_initialized(&self) -> bool {
        self.stats.iter().all(|s| s.initialized)
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::dims(format!(
                "batch has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        self.config.check_input(h, w)
    }

    /// Forward pass returning logits. Train mode normalizes with batch
    /// statistics and folds them into the running estimates.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train => {
                let (logits, tape) = self.forward_train(batch)?;
                self.commit_batch_stats(&tape);
                Ok(logits)
            }
        }
    }

    /// Eval-mode forward pass using running batch-norm statistics.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = batch.clone();
        for block in &self.encoder {
            let out = self.double_eval(block, &x)?;
            x = maxpool2d(&out, 2)?.0;
            skips.push(out);
        }
        x = self.double_eval(&self.bottleneck, &x)?;
        for up in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let upsampled = self.upconv(&up.up, &x)?;
            x = self.double_eval(&up.block, &concat_channels(&skip, &upsampled)?)?;
        }
        self.conv(&self.head, &x, 0)
    }

    /// Train-mode forward pass that records what the backward pass needs.
    /// Running statistics are left untouched.
    pub fn forward_train(&self, batch: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_batch(batch)?;
        let mut encoder = Vec::with_capacity(self.config.depth);
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = batch.clone();
        for block in &self.encoder {
            let (out, tape) = self.double_train(block, x)?;
            let (pooled, argmax) = maxpool2d(&out, 2)?;
            encoder.push(EncoderTape {
                block: tape,
                block_out_dims: out.dims().to_vec(),
                argmax,
            });
            skips.push(out);
            x = pooled;
        }
        let (mut x, bottleneck) = self.double_train(&self.bottleneck, x)?;
        let mut decoder = Vec::with_capacity(self.config.depth);
        for up in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let upsampled = self.upconv(&up.up, &x)?;
            let joined = concat_channels(&skip, &upsampled)?;
            let skip_channels = skip.dims()[1];
            let (out, block) = self.double_train(&up.block, joined)?;
            decoder.push(DecoderTape {
                up_input: x,
                skip_channels,
                block,
            });
            x = out;
        }
        let logits = self.conv(&self.head, &x, 0)?;
        Ok((
            logits,
            Tape {
                encoder,
                bottleneck,
                decoder,
                head_input: x,
            },
        ))
    }

    /// Folds the batch statistics recorded in `tape` into the running
    /// estimates.
    pub fn commit_batch_stats(&mut self, tape: &Tape) {
        let momentum = self.config.bn_momentum;
        let commit = |stats: &mut [RunningStats], block: &DoubleConv, t: &DoubleTape| {
            stats[block.first.stats].update(&t.first.bn, momentum);
            stats[block.second.stats].update(&t.second.bn, momentum);
        };
        for (block, t) in self.encoder.iter().zip(&tape.encoder) {
            commit(&mut self.stats, block, &t.block);
        }
        commit(&mut self.stats, &self.bottleneck, &tape.bottleneck);
        for (up, t) in self.decoder.iter().zip(&tape.decoder) {
            commit(&mut self.stats, &up.block, &t.block);
        }
    }

    /// Gradients of a scalar loss with respect to every parameter, given its
    /// gradient with respect to the logits. Output order matches
    /// [`UNet::params`].
    pub fn backward(&self, tape: &Tape, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut g = self.conv_backward(&self.head, &tape.head_input, grad_logits, 0, &mut grads)?;

        let mut skip_grads = Vec::with_capacity(self.config.depth);
        for (up, t) in self.decoder.iter().zip(&tape.decoder).rev() {
            let g_joined = self.double_backward(&up.block, &t.block, g, &mut grads)?;
            let (g_skip, g_up) = split_channels(&g_joined, t.skip_channels)?;
            skip_grads.push(g_skip);
            g = self.upconv_backward(&up.up, &t.up_input, &g_up, &mut grads)?;
        }
        g = self.double_backward(&self.bottleneck, &tape.bottleneck, g, &mut grads)?;
        for (block, t) in self.encoder.iter().zip(&tape.encoder).rev() {
            let mut g_out = maxpool2d_backward(&t.block_out_dims, &t.argmax, &g)?;
            let g_skip = skip_grads.pop().expect("one skip gradient per level");
            g_out.axpy(1.0, &g_skip)?;
            g = self.double_backward(block, &t.block, g_out, &mut grads)?;
        }
        Ok(grads
            .into_iter()
            .zip(&self.names)
            .map(|(g, name)| g.unwrap_or_else(|| panic!("no gradient reached `{name}`")))
            .collect())
    }

    fn conv(&self, slot: &ConvSlot, x: &Tensor, padding: usize) -> Result<Tensor> {
        conv2d(x, &self.params[slot.kernel], &self.params[slot.bias], 1, padding)
    }

    fn upconv(&self, slot: &ConvSlot, x: &Tensor) -> Result<Tensor> {
        upconv2d(x, &self.params[slot.kernel], &self.params[slot.bias], 2)
    }

    fn conv_bn_eval(&self, layer: &ConvBn, x: &Tensor) -> Result<Tensor> {
        let y = self.conv(&layer.conv, x, 1)?;
        let y = batchnorm2d_eval(
            &y,
            &self.params[layer.gamma],
            &self.params[layer.beta],
            &self.stats[layer.stats],
            self.config.bn_eps,
        )?;
        Ok(relu(&y))
    }

    fn double_eval(&self, block: &DoubleConv, x: &Tensor) -> Result<Tensor> {
        let y = self.conv_bn_eval(&block.first, x)?;
        self.conv_bn_eval(&block.second, &y)
    }

    fn conv_bn_train(&self, layer: &ConvBn, x: Tensor) -> Result<(Tensor, ConvBnTape)> {
        let y = self.conv(&layer.conv, &x, 1)?;
        let (pre_activation, bn) = batchnorm2d_train(
            &y,
            &self.params[layer.gamma],
            &self.params[layer.beta],
            self.config.bn_eps,
        )?;
        let out = relu(&pre_activation);
        Ok((
            out,
            ConvBnTape {
                input: x,
                bn,
                pre_activation,
            },
        ))
    }

    fn double_train(&self, block: &DoubleConv, x: Tensor) -> Result<(Tensor, DoubleTape)> {
        let (y, first) = self.conv_bn_train(&block.first, x)?;
        let (y, second) = self.conv_bn_train(&block.second, y)?;
        Ok((y, DoubleTape { first, second }))
    }

    fn conv_backward(
        &self,
        slot: &ConvSlot,
        input: &Tensor,
        grad_out: &Tensor,
        padding: usize,
        grads: &mut [Option<Tensor>],
    ) -> Result<Tensor> {
        let mut lg = conv2d_backward(input, &self.params[slot.kernel], grad_out, 1, padding)?;
        grads[slot.kernel] = Some(lg.take("kernel"));
        grads[slot.bias] = Some(lg.take("bias"));
        Ok(lg.grad_input)
    }

    fn upconv_backward(
        &self,
        slot: &ConvSlot,
        input: &Tensor,
        grad_out: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<Tensor> {
        let mut lg = upconv2d_backward(input, &self.params[slot.kernel], grad_out, 2)?;
        grads[slot.kernel] = Some(lg.take("kernel"));
        grads[slot.bias] = Some(lg.take("bias"));
        Ok(lg.grad_input)
    }

    fn conv_bn_backward(
        &self,
        layer: &ConvBn,
        tape: &ConvBnTape,
        grad_out: Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<Tensor> {
        let g = relu_backward(&tape.pre_activation, &grad_out)?;
        let mut lg = batchnorm2d_backward(&tape.bn, &self.params[layer.gamma], &g)?;
        grads[layer.gamma] = Some(lg.take("gamma"));
        grads[layer.beta] = Some(lg.take("beta"));
        self.conv_backward(&layer.conv, &tape.input, &lg.grad_input, 1, grads)
    }

    fn double_backward(
        &self,
        block: &DoubleConv,
        tape: &DoubleTape,
        grad_out: Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<Tensor> {
        let g = self.conv_bn_backward(&block.second, &tape.second, grad_out, grads)?;
        self.conv_bn_backward(&block.first, &tape.first, g, grads)
    }
}
