//! Content-adaptive spatial attention.
//!
//! A patch router scores every `q x q` patch of a feature map. Hard patches go through
//! windowed self-attention whose keys and values come from a larger co-centred
//! `tau*q x tau*q` window; easy patches go through a cheap linear map modulated by a
//! depthwise convolution. Outputs are scattered back into place, projected, and added
//! to the input.
//!
//! In inference mode the router keeps the top `round(gamma * P)` patches by logit and
//! only the chosen branch runs on each patch. In training mode a two-class Gumbel-softmax
//! picks patches; both branches run everywhere and are blended by the (straight-through)
//! decision so that gradients reach the router.

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_bail, Error, Result};
use crate::nn::{
    avg_pool, pad_spatial, sigmoid, softmax_last, Conv2d, DepthwiseConv, Init, LayerNorm,
    Linear,
};

/// How routing decisions are made.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Routing {
    /// Deterministic top-k selection of `round(gamma * P)` patches.
    Infer { gamma: f64 },
    /// Gumbel-softmax sampling.
    Train {
        temperature: f64,
        /// Add Gumbel noise; disabled for gradient checks.
        noise: bool,
        /// Hard forward / soft backward. When false the soft probability is the gate.
        straight_through: bool,
    },
}

impl Routing {
    pub fn train(temperature: f64) -> Self {
        Routing::Train {
            temperature,
            noise: true,
            straight_through: true,
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Routing::Train { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteMode {
    Train,
    Infer,
}

/// Per-image routing outcome over a `rows x cols` patch grid (row-major patch indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub rows: usize,
    pub cols: usize,
    pub logits: Vec<f64>,
    pub hard_prob: Vec<f64>,
    /// Ascending patch indices routed to attention.
    pub idx_hard: Vec<usize>,
    /// Ascending patch indices routed to convolution.
    pub idx_easy: Vec<usize>,
    pub gamma: f64,
    pub mode: RouteMode,
}

impl RouterDecision {
    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_hard(&self) -> Vec<bool> {
        let mut hard = vec![false; self.patch_count()];
        for &i in &self.idx_hard {
            hard[i] = true;
        }
        hard
    }
}

/// Number of hard patches kept at inference for ratio `gamma` over `patches` patches.
pub fn hard_count(gamma: f64, patches: usize) -> usize {
    ((gamma * patches as f64).round() as usize).min(patches)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        config_bail!("gamma must lie in [0, 1], got {gamma}");
    }
    Ok(())
}

/// Inference routing: the `round(gamma * P)` largest logits are hard, ties broken by
/// ascending patch index.
pub fn decide_infer(logits: &[f64], rows: usize, cols: usize, gamma: f64) -> Result<RouterDecision> {
    check_gamma(gamma)?;
    let p = rows * cols;
    if logits.len() != p {
        return Err(Error::Shape(format!("{} logits for a {rows}x{cols} grid", logits.len())));
    }
    let k = hard_count(gamma, p);
    let mut order: Vec<usize> = (0..p).collect();
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie.
    order.sort_by(|&a, &b| (logits[b] + 0.0).total_cmp(&(logits[a] + 0.0)).then(a.cmp(&b)));
    let mut idx_hard = order[..k].to_vec();
    let mut idx_easy = order[k..].to_vec();
    idx_hard.sort_unstable();
    idx_easy.sort_unstable();
    Ok(RouterDecision {
        rows,
        cols,
        hard_prob: logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect(),
        logits: logits.to_vec(),
        idx_hard,
        idx_easy,
        gamma: if p == 0 { 0.0 } else { k as f64 / p as f64 },
        mode: RouteMode::Infer,
    })
}

/// Training routing from already-perturbed logits: a patch is hard when its perturbed
/// logit is positive (the argmax of the two-class logits `(l + g, 0)`).
pub fn decide_train(
    logits: &[f64],
    perturbed: &[f64],
    rows: usize,
    cols: usize,
    temperature: f64,
) -> RouterDecision {
    let mut idx_hard = Vec::new();
    let mut idx_easy = Vec::new();
    for (i, &y) in perturbed.iter().enumerate() {
        if y > 0.0 {
            idx_hard.push(i);
        } else {
            idx_easy.push(i);
        }
    }
    let p = perturbed.len().max(1);
    RouterDecision {
        rows,
        cols,
        logits: logits.to_vec(),
        hard_prob: perturbed.iter().map(|&y| 1.0 / (1.0 + (-y / temperature).exp())).collect(),
        gamma: idx_hard.len() as f64 / p as f64,
        idx_hard,
        idx_easy,
        mode: RouteMode::Train,
    }
}

/// Difference of two independent standard Gumbel samples (a standard logistic sample).
pub fn gumbel_difference(rng: &mut ChaCha8Rng) -> f64 {
    let mut gumbel = || {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    };
    gumbel() - gumbel()
}

/// `(2h/H - 1, 2w/W - 1)` for every pixel, shape `[H, W, 2]`.
pub fn positional_grid(h: usize, w: usize, device: &Device) -> Result<Tensor> {
    let mut v = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            v.push(2.0 * y as f64 / h as f64 - 1.0);
            v.push(2.0 * x as f64 / w as f64 - 1.0);
        }
    }
    Ok(Tensor::from_vec(v, (h, w, 2), device)?)
}

/// `[B, H, W, C] -> [B * P, q*q, C]` with patches in row-major order.
pub fn patchify(z: &Tensor, q: usize) -> Result<Tensor> {
    let (b, h, w, c) = z.dims4()?;
    if h % q != 0 || w % q != 0 {
        config_bail!("feature map {h}x{w} is not divisible by window {q}");
    }
    Ok(z.reshape((b, h / q, q, w / q, q, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / q) * (w / q), q * q, c))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, b: usize, h: usize, w: usize, q: usize) -> Result<Tensor> {
    let c = patches.dim(2)?;
    Ok(patches
        .reshape((b, h / q, w / q, q, q, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), device)?)
}

/// Extracts the `q x q` patches with flat indices `idx` (`b * P + p`): `[n, q*q, C]`.
pub fn gather_patches(z: &Tensor, q: usize, idx: &[usize]) -> Result<Tensor> {
    let all = patchify(z, q)?;
    Ok(all.index_select(&index_tensor(idx, z.device())?, 0)?)
}

/// Reassembles per-patch outputs into a feature map. `parts[i]` holds rows for the
/// flat patch indices `ids[i]`; together the id lists must cover every patch once.
pub fn scatter_patches(
    parts: &[(&Tensor, &[usize])],
    b: usize,
    h: usize,
    w: usize,
    q: usize,
) -> Result<Tensor> {
    let total = b * (h / q) * (w / q);
    let mut position = vec![usize::MAX; total];
    let mut offset = 0;
    let mut tensors = Vec::new();
    for (t, ids) in parts {
        if ids.is_empty() {
            continue;
        }
        for (j, &id) in ids.iter().enumerate() {
            if id >= total || position[id] != usize::MAX {
                return Err(Error::Shape(format!("patch {id} missing from or repeated in the cover")));
            }
            position[id] = offset + j;
        }
        offset += ids.len();
        tensors.push((*t).clone());
    }
    if position.contains(&usize::MAX) {
        return Err(Error::Shape("patch cover is incomplete".into()));
    }
    let stacked = if tensors.len() == 1 {
        tensors.pop().unwrap()
    } else {
        Tensor::cat(&tensors, 0)?
    };
    let device = stacked.device().clone();
    let ordered = if position.iter().enumerate().all(|(i, &p)| i == p) {
        stacked
    } else {
        stacked.index_select(&index_tensor(&position, &device)?, 0)?
    };
    unpatchify(&ordered, b, h, w, q)
}

/// Router output for a batch.
#[derive(Debug, Clone)]
pub struct RouteOutput {
    pub decisions: Vec<RouterDecision>,
    /// Per-patch gate `[B * P]` in training mode (1 = attention).
    pub gate: Option<Tensor>,
    /// Realized hard ratio as a scalar tensor; differentiable in training mode.
    pub gamma: Tensor,
}

/// Predicts one logit per patch from the features, a global feature of the degraded
/// image and a positional grid.
#[derive(Debug, Clone)]
pub struct PatchRouter {
    pub global_in: Conv2d,
    pub global_out: Linear,
    pub mask_in: Linear,
    /// Runs on the patch grid.
    pub mask_out: Conv2d,
    pub window: usize,
}

impl PatchRouter {
    pub fn new(init: &mut Init, channels: usize, global_channels: usize, hidden: usize, window: usize) -> Result<Self> {
        Ok(Self {
            global_in: Conv2d::new(init, "global_in", 3, global_channels, 3)?,
            global_out: Linear::new(init, "global_out", global_channels, global_channels, true)?,
            mask_in: Linear::new(init, "mask_in", channels + global_channels + 2, hidden, true)?,
            mask_out: Conv2d::new(init, "mask_out", hidden, 1, 3)?,
            window,
        })
    }

    /// Patch logits `[B, P]`. `image` is the degraded image resized to the feature resolution.
    pub fn logits(&self, z: &Tensor, image: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = z.dims4()?;
        let q = self.window;
        if h % q != 0 || w % q != 0 {
            config_bail!("feature map {h}x{w} is not divisible by window {q}");
        }
        let global = self
            .global_out
            .forward(&self.global_in.forward(image)?.gelu_erf()?)?;
        let pos = positional_grid(h, w, z.device())?
            .to_dtype(z.dtype())?
            .unsqueeze(0)?
            .broadcast_as((b, h, w, 2))?
            .contiguous()?;
        let feats = Tensor::cat(&[z, &global, &pos], 3)?;
        let hidden = avg_pool(&self.mask_in.forward(&feats)?.gelu_erf()?, q)?;
        Ok(self.mask_out.forward(&hidden)?.reshape((b, (h / q) * (w / q)))?)
    }

    pub fn route(
        &self,
        z: &Tensor,
        image: &Tensor,
        routing: Routing,
        rng: &mut ChaCha8Rng,
    ) -> Result<RouteOutput> {
        let (b, h, w, _) = z.dims4()?;
        let (rows, cols) = (h / self.window, w / self.window);
        let p = rows * cols;
        let logits = self.logits(z, image)?;
        let host: Vec<f64> = logits.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        match routing {
            Routing::Infer { gamma } => {
                let decisions = host
                    .chunks(p)
                    .map(|l| decide_infer(l, rows, cols, gamma))
                    .collect::<Result<Vec<_>>>()?;
                let mean = decisions.iter().map(|d| d.gamma).sum::<f64>() / b as f64;
                let gamma = Tensor::new(mean, z.device())?.to_dtype(z.dtype())?;
                Ok(RouteOutput {
                    decisions,
                    gate: None,
                    gamma,
                })
            }
            Routing::Train {
                temperature,
                noise,
                straight_through,
            } => {
                if !(temperature > 0.0) {
                    config_bail!("temperature must be positive, got {temperature}");
                }
                let noise_vals: Vec<f64> = (0..b * p)
                    .map(|_| if noise { gumbel_difference(rng) } else { 0.0 })
                    .collect();
                let perturbed: Vec<f64> = host.iter().zip(&noise_vals).map(|(l, g)| l + g).collect();
                let noise_t = Tensor::from_vec(noise_vals, (b, p), z.device())?.to_dtype(z.dtype())?;
                let soft = sigmoid(&((&logits + noise_t)? / temperature)?)?;
                let decisions: Vec<RouterDecision> = host
                    .chunks(p)
                    .zip(perturbed.chunks(p))
                    .map(|(l, y)| decide_train(l, y, rows, cols, temperature))
                    .collect();
                let gate = if straight_through {
                    let hard: Vec<f64> = perturbed.iter().map(|&y| if y > 0.0 { 1.0 } else { 0.0 }).collect();
                    let hard = Tensor::from_vec(hard, (b, p), z.device())?.to_dtype(z.dtype())?;
                    (hard + (&soft - soft.detach())?)?
                } else {
                    soft
                };
                let gamma = gate.mean_all()?;
                Ok(RouteOutput {
                    decisions,
                    gate: Some(gate.flatten_all()?),
                    gamma,
                })
            }
        }
    }
}

/// Cross-feature spatial attention sublayer (residual).
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub norm: LayerNorm,
    pub router: PatchRouter,
    pub proj_q: Linear,
    pub proj_k: Linear,
    pub proj_v: Linear,
    pub alpha: Tensor,
    pub proj_easy: Linear,
    pub dw_easy: DepthwiseConv,
    pub proj_out: Linear,
    pub window: usize,
    pub kv_window: usize,
}

impl SpatialAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        channels: usize,
        window: usize,
        kv_window: usize,
        conv_kernel: usize,
        global_channels: usize,
        router_hidden: usize,
    ) -> Result<Self> {
        if kv_window < window {
            config_bail!("key/value window {kv_window} smaller than window {window}");
        }
        let router = {
            let mut r = init.pp("router");
            PatchRouter::new(&mut r, channels, global_channels, router_hidden, window)?
        };
        Ok(Self {
            norm: LayerNorm::new(init, "norm", channels)?,
            router,
            proj_q: Linear::new(init, "proj_q", channels, channels, false)?,
            proj_k: Linear::new(init, "proj_k", channels, channels, false)?,
            proj_v: Linear::new(init, "proj_v", channels, channels, false)?,
            alpha: init.constant("alpha", &[1], (channels as f64).sqrt())?,
            proj_easy: Linear::new(init, "proj_easy", channels, channels, false)?,
            dw_easy: DepthwiseConv::new(init, "dw_easy", channels, conv_kernel)?,
            proj_out: Linear::output(init, "proj_out", channels, channels)?,
            window,
            kv_window,
        })
    }

    /// Zero padding before/after the map so every patch has a co-centred key/value window.
    pub fn kv_padding(&self) -> (usize, usize) {
        let extra = self.kv_window - self.window;
        let before = extra.div_ceil(2);
        (before, extra - before)
    }

    /// Flat indices into the padded `[B, Hp, Wp]` grid of the key/value window of each patch.
    pub fn window_indices(&self, b: usize, h: usize, w: usize, ids: &[usize]) -> Vec<usize> {
        let q = self.window;
        let kv = self.kv_window;
        let (before, after) = self.kv_padding();
        let (hp, wp) = (h + before + after, w + before + after);
        let cols = w / q;
        let per_image = (h / q) * cols;
        let mut out = Vec::with_capacity(ids.len() * kv * kv);
        for &id in ids {
            let (bi, p) = (id / per_image, id % per_image);
            debug_assert!(bi < b);
            let (py, px) = (p / cols, p % cols);
            for dy in 0..kv {
                for dx in 0..kv {
                    out.push((bi * hp + py * q + dy) * wp + px * q + dx);
                }
            }
        }
        out
    }

    /// Overlapping-window attention for the patches `ids` of the normalized map `x`.
    /// Returns `[n, q*q, C]`.
    pub fn attn_branch(&self, x: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (attn, v) = self.attn_maps(x, ids)?;
        Ok(attn.matmul(&v)?)
    }

    /// Attention maps `[n, q*q, kv*kv]` and gathered values `[n, kv*kv, C]`.
    pub fn attn_maps(&self, x: &Tensor, ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let (b, h, w, c) = x.dims4()?;
        let kv = self.kv_window;
        let q = self.proj_q.forward(&gather_patches(x, self.window, ids)?)?;
        let (before, after) = self.kv_padding();
        let windows = index_tensor(&self.window_indices(b, h, w, ids), x.device())?;
        let unfold = |t: Tensor| -> Result<Tensor> {
            let padded = pad_spatial(&t, before, after)?;
            let flat = padded.reshape((padded.elem_count() / c, c))?;
            Ok(flat.index_select(&windows, 0)?.reshape((ids.len(), kv * kv, c))?)
        };
        let k = unfold(self.proj_k.forward(x)?)?;
        let v = unfold(self.proj_v.forward(x)?)?;
        let scores = q.matmul(&k.transpose(1, 2)?.contiguous()?)?;
        let attn = softmax_last(&scores.broadcast_div(&self.alpha)?)?;
        Ok((attn, v))
    }

    /// Linear map modulated by its own depthwise convolution, per patch with zero padding
    /// at patch borders. `z_easy`: `[n, q*q, C]`.
    pub fn conv_branch(&self, z_easy: &Tensor) -> Result<Tensor> {
        let (n, qq, c) = z_easy.dims3()?;
        let q = self.window;
        let v = self.proj_easy.forward(z_easy)?.reshape((n, q, q, c))?;
        let modulated = (&v * self.dw_easy.forward(&v)?)?;
        Ok(modulated.reshape((n, qq, c))?)
    }

    /// Full sublayer: `proj_out(route-and-mix(LN(z))) + z`. `image` is the degraded image
    /// at this level's resolution.
    pub fn forward(
        &self,
        z: &Tensor,
        image: &Tensor,
        routing: Routing,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, RouteOutput)> {
        let (b, h, w, _) = z.dims4()?;
        let q = self.window;
        let x = self.norm.forward(z)?;
        let route = self.router.route(&x, image, routing, rng)?;
        let p = (h / q) * (w / q);
        let mixed = match &route.gate {
            None => {
                let mut hard = Vec::new();
                let mut easy = Vec::new();
                for (bi, d) in route.decisions.iter().enumerate() {
                    hard.extend(d.idx_hard.iter().map(|&i| bi * p + i));
                    easy.extend(d.idx_easy.iter().map(|&i| bi * p + i));
                }
                let hard_out = if hard.is_empty() {
                    None
                } else {
                    Some(self.attn_branch(&x, &hard)?)
                };
                let easy_out = if easy.is_empty() {
                    None
                } else {
                    Some(self.conv_branch(&gather_patches(&x, q, &easy)?)?)
                };
                let mut parts: Vec<(&Tensor, &[usize])> = Vec::new();
                if let Some(t) = &hard_out {
                    parts.push((t, &hard));
                }
                if let Some(t) = &easy_out {
                    parts.push((t, &easy));
                }
                scatter_patches(&parts, b, h, w, q)?
            }
            Some(gate) => {
                let all: Vec<usize> = (0..b * p).collect();
                let attn = self.attn_branch(&x, &all)?;
                let conv = self.conv_branch(&patchify(&x, q)?)?;
                let g = gate.reshape((b * p, 1, 1))?;
                let blended = (attn.broadcast_mul(&g)? + conv.broadcast_mul(&(1.0 - &g)?)?)?;
                unpatchify(&blended, b, h, w, q)?
            }
        };
        Ok(((self.proj_out.forward(&mixed)? + z)?, route))
    }

    /// The sublayer with every patch forced through the attention branch.
    pub fn forward_all_attention(&self, z: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = z.dims4()?;
        let q = self.window;
        let x = self.norm.forward(z)?;
        let all: Vec<usize> = (0..b * (h / q) * (w / q)).collect();
        let out = unpatchify(&self.attn_branch(&x, &all)?, b, h, w, q)?;
        Ok((self.proj_out.forward(&out)? + z)?)
    }

    /// The sublayer with every patch forced through the convolution branch.
    pub fn forward_all_conv(&self, z: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = z.dims4()?;
        let q = self.window;
        let x = self.norm.forward(z)?;
        let out = unpatchify(&self.conv_branch(&patchify(&x, q)?)?, b, h, w, q)?;
        Ok((self.proj_out.forward(&out)? + z)?)
    }
}
