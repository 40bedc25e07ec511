//! Parameter storage and channels-last (NHWC) tensor primitives shared by all blocks.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A named trainable tensor, optionally with a per-element learning-rate scale.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub lr_scale: Option<Tensor>,
}

/// Ordered collection of every trainable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|p| p.var.clone()).collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub(crate) fn set_lr_scale(&mut self, name: &str, scale: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
        p.lr_scale = Some(scale);
        Ok(())
    }

    fn insert(&mut self, name: String, var: Var) -> Result<()> {
        if self.get(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param {
            name,
            var,
            lr_scale: None,
        });
        Ok(())
    }
}

struct InitState<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    dtype: DType,
    device: Device,
    zero_out_proj: bool,
}

/// Hierarchical parameter initializer; every tensor it creates is registered in a [`ParamStore`].
pub struct Init<'a, 'b> {
    state: &'b mut InitState<'a>,
    prefix: String,
}

/// Runs `f` with a root initializer and returns its result.
pub fn with_init<T>(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    dtype: DType,
    device: &Device,
    zero_out_proj: bool,
    f: impl FnOnce(&mut Init) -> Result<T>,
) -> Result<T> {
    let mut state = InitState {
        store,
        rng,
        dtype,
        device: device.clone(),
        zero_out_proj,
    };
    let mut init = Init {
        state: &mut state,
        prefix: String::new(),
    };
    f(&mut init)
}

impl<'a, 'b> Init<'a, 'b> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Init<'a, '_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Init {
            state: self.state,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.dtype
    }

    pub fn device(&self) -> &Device {
        &self.state.device
    }

    pub fn zero_out_proj(&self) -> bool {
        self.state.zero_out_proj
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.state.device)?.to_dtype(self.state.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let full = self.full_name(name);
        self.state.store.insert(full, var)?;
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.state.rng.random_range(-bound..=bound))
            .collect();
        self.from_values(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.from_values(name, shape, vec![value; n])
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.state.rng
    }
}

/// Applies `x @ weight` over the last axis of a tensor of any rank.
pub fn matmul_last(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let cin = *dims.last().ok_or_else(|| Error::Shape("scalar input".into()))?;
    let cout = weight.dim(1)?;
    let rows = x.elem_count() / cin.max(1);
    let y = x.contiguous()?.reshape((rows, cin))?.matmul(weight)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = cout;
    Ok(y.reshape(out_dims)?)
}

/// Pointwise (1x1) convolution, optionally biased, over the channel axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (cin as f64).sqrt();
        let mut init = init.pp(name);
        let weight = init.uniform("weight", &[cin, cout], bound)?;
        let bias = if bias {
            Some(init.uniform("bias", &[cout], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// A bias-free projection that is zero-initialized when the initializer asks for it.
    pub fn output(init: &mut Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        if init.zero_out_proj() {
            let weight = init.pp(name).constant("weight", &[cin, cout], 0.0)?;
            Ok(Self { weight, bias: None })
        } else {
            Self::new(init, name, cin, cout, false)
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Zero-pads the two spatial axes of an NHWC tensor.
pub fn pad_spatial(x: &Tensor, before: usize, after: usize) -> Result<Tensor> {
    if before == 0 && after == 0 {
        return Ok(x.clone());
    }
    Ok(x.pad_with_zeros(1, before, after)?
        .pad_with_zeros(2, before, after)?)
}

/// Depthwise `k x k` convolution with zero padding, kernel shape `[k, k, C]`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub kernel: Tensor,
    pub k: usize,
}

impl DepthwiseConv {
    pub fn new(init: &mut Init, name: &str, channels: usize, k: usize) -> Result<Self> {
        let bound = 1.0 / (k as f64);
        let kernel = init.pp(name).uniform("kernel", &[k, k, channels], bound)?;
        Ok(Self { kernel, k })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depthwise_conv(x, &self.kernel)
    }
}

pub fn depthwise_conv(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    Ok(crate::dwconv::depthwise(x, kernel)?)
}

/// Dense `k x k` convolution with bias and zero padding, weight shape `[k * k * Cin, Cout]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub k: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let mut init = init.pp(name);
        let weight = init.uniform("weight", &[k * k * cin, cout], bound)?;
        let bias = init.uniform("bias", &[cout], bound)?;
        Ok(Self { weight, bias, k })
    }

    /// Zero weight and bias, so the layer outputs exactly zero.
    pub fn zeros(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let mut init = init.pp(name);
        let weight = init.constant("weight", &[k * k * cin, cout], 0.0)?;
        let bias = init.constant("bias", &[cout], 0.0)?;
        Ok(Self { weight, bias, k })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0] / (self.k * self.k)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (cin, cout, k) = (self.in_dim(), self.out_dim(), self.k);
        let kernel = self
            .weight
            .reshape((k, k, cin, cout))?
            .permute((3, 2, 0, 1))?
            .contiguous()?;
        let y = x
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .conv2d(&kernel, k / 2, 1, 1, 1)?
            .permute((0, 2, 3, 1))?
            .contiguous()?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Per-pixel normalization over the channel axis followed by an affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let mut init = init.pp(name);
        let scale = init.constant("scale", &[channels], 1.0)?;
        let shift = init.constant("shift", &[channels], 0.0)?;
        Ok(Self { scale, shift })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.scale)?
            .broadcast_add(&self.shift)?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `[B, H, W, C] -> [B, H/2, W/2, 4C]`; output channel `c * 4 + dy * 2 + dx`.
pub fn pixel_unshuffle(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("pixel_unshuffle needs even size, got {h}x{w}")));
    }
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!("pixel_shuffle needs channels divisible by 4, got {c4}")));
    }
    let c = c4 / 4;
    Ok(x.reshape((b, h, w, c, 2, 2))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Row-stochastic bilinear interpolation matrix `[out, inp]` with half-pixel centers.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[o * inp + lo] += 1.0 - frac;
        m[o * inp + hi] += frac;
    }
    m
}

/// Bilinear resize of an NHWC tensor; differentiable with respect to `x`.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rh = Tensor::from_vec(bilinear_matrix(oh, h), (oh, h), dev)?.to_dtype(x.dtype())?;
    let rw = Tensor::from_vec(bilinear_matrix(ow, w), (ow, w), dev)?.to_dtype(x.dtype())?;
    let rows = rh
        .broadcast_left(b)?
        .contiguous()?
        .matmul(&x.contiguous()?.reshape((b, h, w * c))?)?;
    let cols = rw
        .broadcast_left(b * oh)?
        .contiguous()?
        .matmul(&rows.reshape((b * oh, w, c))?)?;
    Ok(cols.reshape((b, oh, ow, c))?)
}

/// Non-overlapping `q x q` average pooling of an NHWC tensor.
pub fn avg_pool(x: &Tensor, q: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / q, q, w / q, q, c))?
        .mean_keepdim(4)?
        .mean_keepdim(2)?
        .reshape((b, h / q, w / q, c))?)
}

/// Global average pool over the spatial axes: `[B, H, W, C] -> [B, 1, 1, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(2)?.mean_keepdim(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn pixel_unshuffle_orders_channels() {
        let x = t(&[1., 2., 3., 4.], &[1, 2, 2, 1]);
        let y = pixel_unshuffle(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 4]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1., 2., 3., 4.]);
        let back = pixel_shuffle(&y).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(16, 8), (8, 16), (5, 3), (1, 4)] {
            let m = bilinear_matrix(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // Exact 2x downscale is a 2x2 mean.
        let m = bilinear_matrix(2, 4);
        assert_eq!(m, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::full(0.25f64, (1, 4, 4, 3), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 8, 2).unwrap();
        assert_eq!(y.dims(), &[1, 8, 2, 3]);
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = with_init(&mut store, &mut rng, DType::F64, &Device::Cpu, false, |i| {
            DepthwiseConv::new(i, "dw", 2, 3)
        })
        .unwrap();
        let mut k = vec![0.0; 18];
        k[4 * 2] = 1.0;
        k[4 * 2 + 1] = 1.0;
        let kernel = t(&k, &[3, 3, 2]);
        let x = Tensor::arange(0f64, 32., &Device::Cpu).unwrap().reshape((1, 4, 4, 2)).unwrap();
        let y = depthwise_conv(&x, &kernel).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        assert_eq!(conv.kernel.dims(), &[3, 3, 2]);
    }

    #[test]
    fn dense_conv_matches_direct_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = with_init(&mut store, &mut rng, DType::F64, &Device::Cpu, false, |i| {
            Conv2d::new(i, "c", 2, 3, 3)
        })
        .unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4 * 2).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let xt = t(&x, &[2, 5, 4, 2]);
        let y = conv.forward(&xt).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = conv.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = conv.bias.to_vec1::<f64>().unwrap();
        let at = |b: usize, i: isize, j: isize, c: usize| -> f64 {
            if i < 0 || j < 0 || i >= 5 || j >= 4 {
                0.0
            } else {
                x[((b * 5 + i as usize) * 4 + j as usize) * 2 + c]
            }
        };
        for b in 0..2 {
            for i in 0..5 {
                for j in 0..4 {
                    for o in 0..3 {
                        let mut s = bv[o];
                        for dy in 0..3 {
                            for dx in 0..3 {
                                for c in 0..2 {
                                    let row = (dy * 3 + dx) * 2 + c;
                                    s += wv[row * 3 + o]
                                        * at(b, i as isize + dy as isize - 1, j as isize + dx as isize - 1, c);
                                }
                            }
                        }
                        let got = y[((b * 5 + i) * 4 + j) * 3 + o];
                        assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ln = with_init(&mut store, &mut rng, DType::F64, &Device::Cpu, false, |i| {
            LayerNorm::new(i, "ln", 2)
        })
        .unwrap();
        let x = t(&[0., 2., 4., 4.], &[1, 1, 2, 2]);
        let y = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let s = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y[0] + s).abs() < 1e-12 && (y[1] - s).abs() < 1e-12);
        assert_eq!(&y[2..], &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = with_init(&mut store, &mut rng, DType::F32, &Device::Cpu, false, |i| {
            i.constant("a", &[1], 0.0)?;
            i.constant("a", &[1], 0.0)
        });
        assert!(res.is_err());
    }
}
