//! Four-level U-shaped encoder-decoder built from alternating channel/spatial attention
//! blocks, with prompt banks between decoder levels.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{select_channel_variant, ChannelAttention, ChannelVariant, FeedForward};
use crate::config::{ModelConfig, Side, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, pixel_shuffle, pixel_unshuffle, resize_bilinear, softmax_last, with_init, Conv2d, Init,
    Linear, ParamStore,
};
use crate::spatial::{RouteOutput, RouterDecision, Routing, SpatialAttention};

/// One transformer block: channel attention, FFN, spatial attention, FFN, each residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub channel: ChannelAttention,
    pub channel_ffn: FeedForward,
    pub spatial: SpatialAttention,
    pub spatial_ffn: FeedForward,
    pub level: usize,
}

impl Block {
    pub fn new(init: &mut Init, config: &ModelConfig, level: usize, side: Side) -> Result<Self> {
        let c = config.channels(level);
        let variant = select_channel_variant(level, side)?;
        Ok(Self {
            channel: ChannelAttention::new(&mut init.pp("channel"), variant, c, config.heads[level - 1])?,
            channel_ffn: FeedForward::new(&mut init.pp("channel_ffn"), c)?,
            spatial: SpatialAttention::new(
                &mut init.pp("spatial"),
                c,
                config.window,
                config.kv_window(),
                config.conv_kernel,
                config.router_global_channels,
                config.router_hidden,
            )?,
            spatial_ffn: FeedForward::new(&mut init.pp("spatial_ffn"), c)?,
            level,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel_ffn.channels()
    }

    pub fn forward(
        &self,
        z: &Tensor,
        image: &Tensor,
        routing: Routing,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, RouteOutput)> {
        let z = self.channel.forward(z)?;
        let z = self.channel_ffn.forward(&z)?;
        let (z, route) = self.spatial.forward(&z, image, routing, rng)?;
        Ok((self.spatial_ffn.forward(&z)?, route))
    }
}

/// Halves resolution and doubles channels: pixel-unshuffle then a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub proj: Linear,
}

impl Downsample {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(init, "proj", 4 * channels, 2 * channels, false)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        self.proj.forward(&pixel_unshuffle(z)?)
    }
}

/// Doubles resolution and halves channels: a 1x1 convolution then pixel-shuffle.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub proj: Linear,
}

impl Upsample {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(init, "proj", channels, 2 * channels, false)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        pixel_shuffle(&self.proj.forward(z)?)
    }
}

/// Task prompt components mixed by feature-conditioned weights and fused into features.
#[derive(Debug, Clone)]
pub struct PromptBank {
    /// `[T, S, S, C]`.
    pub components: Tensor,
    /// `[C, T]`.
    pub mix_weight: Tensor,
    /// `[T]`.
    pub mix_bias: Tensor,
    pub fuse: Conv2d,
}

impl PromptBank {
    /// Parameter suffixes whose given axis is indexed by task.
    pub const TASK_AXES: [(&'static str, usize); 3] =
        [("components", 0), ("mix_weight", 1), ("mix_bias", 0)];

    pub fn new(init: &mut Init, channels: usize, tasks: usize, size: usize) -> Result<Self> {
        let bound = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            components: init.uniform("components", &[tasks, size, size, channels], 1.0)?,
            mix_weight: init.uniform("mix_weight", &[channels, tasks], bound)?,
            mix_bias: init.uniform("mix_bias", &[tasks], bound)?,
            fuse: Conv2d::new(init, "fuse", 2 * channels, channels, 3)?,
        })
    }

    pub fn task_count(&self) -> usize {
        self.components.dims()[0]
    }

    /// Softmax mixing weights `[B, T]`.
    pub fn weights(&self, z: &Tensor) -> Result<Tensor> {
        let (b, _, _, c) = z.dims4()?;
        let pooled = global_avg_pool(z)?.reshape((b, c))?;
        softmax_last(&pooled.matmul(&self.mix_weight)?.broadcast_add(&self.mix_bias)?)
    }

    /// Mixed prompt resized to `z`'s spatial size, `[B, H, W, C]`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = z.dims4()?;
        let (t, s, _, c) = self.components.dims4()?;
        let mixed = self
            .weights(z)?
            .matmul(&self.components.reshape((t, s * s * c))?)?
            .reshape((b, s, s, c))?;
        resize_bilinear(&mixed, h, w)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let prompt = self.generate(z)?;
        self.fuse.forward(&Tensor::cat(&[z, &prompt], D::Minus1)?)
    }
}

/// Construction options for [`CatAir`].
#[derive(Debug, Clone)]
pub struct InitOptions {
    pub seed: u64,
    pub dtype: DType,
    /// Zero-initialize every residual sublayer's output projection.
    pub zero_output_projections: bool,
    /// Zero-initialize the final convolution so the network starts as the identity.
    pub zero_output_conv: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
            zero_output_projections: false,
            zero_output_conv: true,
        }
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub restored: Tensor,
    /// Realized hard ratio per spatial sublayer, in execution order.
    pub gammas: Vec<Tensor>,
    /// Router decisions per spatial sublayer, one per batch image.
    pub decisions: Vec<Vec<RouterDecision>>,
    pub latent_dims: Vec<usize>,
}

impl ForwardOutput {
    pub fn mean_gamma(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&self.gammas, 0)?.mean_all()?)
    }
}

/// The full restoration network.
#[derive(Debug, Clone)]
pub struct CatAir {
    pub config: ModelConfig,
    pub shallow: Conv2d,
    /// Encoder levels 1..=4.
    pub encoder: Vec<Vec<Block>>,
    /// Downsamplers after encoder levels 1..=3.
    pub down: Vec<Downsample>,
    /// Decoder stages for levels 3, 2, 1.
    pub decoder: Vec<DecoderLevel>,
    pub output: Conv2d,
    params: ParamStore,
    dtype: DType,
    device: Device,
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub level: usize,
    pub up: Upsample,
    pub fuse: Linear,
    pub prompt: PromptBank,
    pub blocks: Vec<Block>,
}

impl CatAir {
    pub fn new(config: &ModelConfig, options: &InitOptions) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let c = config.base_channels;
        let (shallow, encoder, down, decoder, output) = with_init(
            &mut params,
            &mut rng,
            options.dtype,
            &device,
            options.zero_output_projections,
            |init| {
                let shallow = Conv2d::new(init, "shallow", 3, c, 3)?;
                let mut encoder = Vec::with_capacity(LEVELS);
                let mut down = Vec::with_capacity(LEVELS - 1);
                for level in 1..=LEVELS {
                    let mut blocks = Vec::new();
                    for i in 0..config.enc_blocks[level - 1] {
                        let mut init = init.pp(format!("enc{level}.block{i}"));
                        blocks.push(Block::new(&mut init, config, level, Side::Encoder)?);
                    }
                    encoder.push(blocks);
                    if level < LEVELS {
                        let mut init = init.pp(format!("enc{level}.down"));
                        down.push(Downsample::new(&mut init, config.channels(level))?);
                    }
                }
                let mut decoder = Vec::with_capacity(LEVELS - 1);
                for (i, level) in (1..LEVELS).rev().enumerate() {
                    let mut init = init.pp(format!("dec{level}"));
                    let ch = config.channels(level);
                    let up = Upsample::new(&mut init.pp("up"), config.channels(level + 1))?;
                    let fuse = Linear::new(&mut init, "fuse", 2 * ch, ch, false)?;
                    let prompt =
                        PromptBank::new(&mut init.pp("prompt"), ch, config.task_count, config.prompt_size)?;
                    let mut blocks = Vec::new();
                    for j in 0..config.dec_blocks[i] {
                        let mut init = init.pp(format!("block{j}"));
                        blocks.push(Block::new(&mut init, config, level, Side::Decoder)?);
                    }
                    decoder.push(DecoderLevel {
                        level,
                        up,
                        fuse,
                        prompt,
                        blocks,
                    });
                }
                let output = if options.zero_output_conv {
                    Conv2d::zeros(init, "output", c, 3, 3)?
                } else {
                    Conv2d::new(init, "output", c, 3, 3)?
                };
                Ok((shallow, encoder, down, decoder, output))
            },
        )?;
        let model = Self {
            config: config.clone(),
            shallow,
            encoder,
            down,
            decoder,
            output,
            params,
            dtype: options.dtype,
            device,
        };
        model.check_schedule()?;
        Ok(model)
    }

    fn check_schedule(&self) -> Result<()> {
        for (i, blocks) in self.encoder.iter().enumerate() {
            for b in blocks {
                if b.channels() != self.config.channels(i + 1) || b.level != i + 1 {
                    return Err(Error::Config(format!("encoder level {} has wrong width", i + 1)));
                }
            }
        }
        for d in &self.decoder {
            for b in &d.blocks {
                if b.channels() != self.config.channels(d.level) {
                    return Err(Error::Config(format!("decoder level {} has wrong width", d.level)));
                }
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn task_count(&self) -> usize {
        self.config.task_count
    }

    /// All blocks in execution order (encoder levels 1..=4, then decoder levels 3..=1).
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.decoder.iter().flat_map(|d| d.blocks.iter()))
    }

    /// Channel variant of every block in execution order.
    pub fn channel_variants(&self) -> Vec<(usize, ChannelVariant)> {
        self.blocks().map(|b| (b.level, b.channel.variant())).collect()
    }

    /// Restores a batch `[B, H, W, 3]` of degraded images.
    pub fn forward(&self, degraded: &Tensor, routing: Routing, rng: &mut ChaCha8Rng) -> Result<ForwardOutput> {
        let (_, h, w, ch) = degraded.dims4()?;
        if ch != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {ch}")));
        }
        self.config.check_input(h, w)?;
        let input = degraded.to_dtype(self.dtype)?;
        let mut images = Vec::with_capacity(LEVELS);
        for level in 1..=LEVELS {
            images.push(resize_bilinear(&input, h >> (level - 1), w >> (level - 1))?);
        }

        let mut gammas = Vec::new();
        let mut decisions = Vec::new();
        let mut run_blocks = |blocks: &[Block], mut z: Tensor, image: &Tensor, rng: &mut ChaCha8Rng| -> Result<Tensor> {
            for block in blocks {
                let (next, route) = block.forward(&z, image, routing, rng)?;
                gammas.push(route.gamma);
                decisions.push(route.decisions);
                z = next;
            }
            Ok(z)
        };

        let mut z = self.shallow.forward(&input)?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for level in 1..=LEVELS {
            z = run_blocks(&self.encoder[level - 1], z, &images[level - 1], rng)?;
            if level < LEVELS {
                skips.push(z.clone());
                z = self.down[level - 1].forward(&z)?;
            }
        }
        let latent_dims = z.dims().to_vec();
        for stage in &self.decoder {
            let up = stage.up.forward(&z)?;
            let skip = &skips[stage.level - 1];
            z = stage.fuse.forward(&Tensor::cat(&[&up, skip], D::Minus1)?)?;
            z = stage.prompt.forward(&z)?;
            z = run_blocks(&stage.blocks, z, &images[stage.level - 1], rng)?;
        }
        let restored = (self.output.forward(&z)? + &input)?;
        Ok(ForwardOutput {
            restored,
            gammas,
            decisions,
            latent_dims,
        })
    }

    /// Inference on one `[H, W, 3]` image at hard ratio `gamma`.
    pub fn restore(&self, image: &Tensor, gamma: f64) -> Result<(Tensor, Vec<RouterDecision>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&image.unsqueeze(0)?, Routing::Infer { gamma }, &mut rng)?;
        let decisions = out.decisions.into_iter().map(|mut d| d.remove(0)).collect();
        Ok((out.restored.squeeze(0)?, decisions))
    }

    /// Copies every parameter of `other` with an identical name and shape into `self`.
    /// Returns the names that were not copied.
    pub fn copy_matching_params(&self, other: &CatAir) -> Result<Vec<String>> {
        let mut skipped = Vec::new();
        for p in self.params.iter() {
            match other.params.get(&p.name) {
                Some(src) if src.var.dims() == p.var.dims() => {
                    p.var.set(&src.var.as_tensor().to_dtype(self.dtype)?)?;
                }
                _ => skipped.push(p.name.clone()),
            }
        }
        Ok(skipped)
    }
}
