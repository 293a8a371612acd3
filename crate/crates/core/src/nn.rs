//! Small neural-network toolkit on top of `candle-core` autodiff.
//!
//! Convolutions are lowered to an explicit im2col op with a hand-written
//! adjoint (col2im), followed by a batched matmul. This keeps both the forward
//! and the backward pass on the fast gemm path.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HammError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn im2col_kernel<T: WithDType>(
    src: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    win: Window,
) -> Vec<T> {
    let k = win.kernel;
    let (ho, wo) = (win.out_len(h), win.out_len(w));
    let l = ho * wo;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); b * ckk * l];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut out[(bi * ckk + row) * l..(bi * ckk + row + 1) * l];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_kernel<T: WithDType>(
    src: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    win: Window,
) -> Vec<T> {
    let k = win.kernel;
    let (ho, wo) = (win.out_len(h), win.out_len(w));
    let l = ho * wo;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let col = &src[(bi * ckk + row) * l..(bi * ckk + row + 1) * l];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                let idx = iy as usize * w + ix as usize;
                                plane[idx] += col[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im expect contiguous input"),
    }
}

struct Im2Col(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let k = self.0.kernel;
        let shape = Shape::from((b, c * k * k, self.0.out_len(h) * self.0.out_len(w)));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_kernel(contiguous_slice(v, layout)?, dims, self.0)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_kernel(contiguous_slice(v, layout)?, dims, self.0)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let grad = grad_res.contiguous()?.apply_op1(Col2Im { win: self.0, h, w })?;
        Ok(Some(grad))
    }
}

struct Col2Im {
    win: Window,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ckk, _) = layout.shape().dims3()?;
        let k = self.win.kernel;
        let c = ckk / (k * k);
        let dims = (b, c, self.h, self.w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_kernel(contiguous_slice(v, layout)?, dims, self.win)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_kernel(contiguous_slice(v, layout)?, dims, self.win)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from(dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.win))?))
    }
}

/// Unfolds `(B, C, H, W)` into `(B, C·k·k, Ho·Wo)` sliding-window columns.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h + 2 * pad < kernel || w + 2 * pad < kernel {
        return Err(HammError::Shape(format!(
            "kernel {kernel} larger than padded input {h}x{w} (pad {pad})"
        )));
    }
    Ok(x.contiguous()?.apply_op1(Im2Col(Window { kernel, stride, pad }))?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - x.neg()?.relu()?.affine(slope, 0.0)?)?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let max = x.max_keepdim(last)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(last)?)?)
}

/// Global average pooling `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(2)?)
}

/// Global max pooling `(B, C, H, W) -> (B, C)`, with the gradient routed to one maximal element.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    let flat = x.flatten_from(2)?;
    let idx = flat.detach().argmax_keepdim(2)?;
    Ok(flat.gather(&idx, 2)?.squeeze(2)?)
}

/// Non-overlapping 2×2 max pooling. The backward pass routes each window's
/// gradient to a single maximal element, including when several tie.
pub fn max_pool2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let windows = x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((b, c, h / 2, w / 2, 4))?;
    let idx = windows.detach().argmax_keepdim(4)?;
    Ok(windows.gather(&idx, 4)?.squeeze(4)?)
}

/// Row-interpolation matrix for a ×2 bilinear resize with half-pixel centers.
fn bilinear_matrix(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = 2 * n;
    let mut data = vec![0f64; m * n];
    for dst in 0..m {
        let src = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let frac = src - i0 as f64;
        data[dst * n + i0] += 1.0 - frac;
        data[dst * n + i1] += frac;
    }
    Ok(Tensor::from_vec(data, (m, n), device)?.to_dtype(dtype)?)
}

/// Bilinear ×2 upsampling, written as two interpolation matmuls so it stays differentiable.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let uh = bilinear_matrix(h, x.dtype(), x.device())?;
    let uw = bilinear_matrix(w, x.dtype(), x.device())?;
    let y = x.broadcast_matmul(&uw.t()?)?;
    Ok(uh.broadcast_matmul(&y)?)
}

/// Named trainable tensors plus the seeded generator used to initialize them.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Current values, detached from the graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every parameter whose name appears in `values`. Returns how many were set.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.vars {
            if let Some(t) = values.get(name) {
                if t.dims() != var.dims() {
                    return Err(HammError::Checkpoint(format!(
                        "parameter {name}: stored shape {:?} vs model shape {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(self.dtype)?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    fn register(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(HammError::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }
}

/// A path prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.store.rng.random_range(-bound..=bound))
            .collect();
        let full = self.full(name);
        self.store.register(full, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        let full = self.full(name);
        self.store.register(full, vec![value; n], shape)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

/// Fully connected layer `y = x Aᵀ + b`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(vs: &mut Scope<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: vs.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: vs.uniform("bias", &[out_dim], bound)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn zero_(&self) -> Result<()> {
        self.weight.set(&self.weight.zeros_like()?)?;
        self.bias.set(&self.bias.zeros_like()?)?;
        Ok(())
    }

    /// Accepts `(.., in_dim)` inputs of any rank ≥ 2.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = *x.dims().last().unwrap_or(&0);
        if last != self.in_dim() {
            return Err(HammError::Shape(format!(
                "linear layer expects last dim {}, got {:?}",
                self.in_dim(),
                x.dims()
            )));
        }
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Dense 2D convolution with square kernels.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        vs: &mut Scope<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: vs.uniform("weight", &[out_ch, in_ch, kernel, kernel], bound)?,
            bias: vs.uniform("bias", &[out_ch], bound)?,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (co, ci, k, _) = self.weight.dims4()?;
        if c != ci {
            return Err(HammError::Shape(format!("conv expects {ci} input channels, got {c}")));
        }
        let ho = (h + 2 * self.pad - k) / self.stride + 1;
        let wo = (w + 2 * self.pad - k) / self.stride + 1;
        let cols = if k == 1 && self.stride == 1 && self.pad == 0 {
            x.reshape((b, c, h * w))?
        } else {
            im2col(x, k, self.stride, self.pad)?
        };
        let wm = self.weight.reshape((co, ci * k * k))?;
        let y = wm.broadcast_matmul(&cols)?;
        let y = y.broadcast_add(&self.bias.reshape((1, co, 1))?)?;
        Ok(y.reshape((b, co, ho, wo))?)
    }
}

/// Depthwise 3×3 convolution followed by a pointwise 1×1 convolution.
#[derive(Clone)]
pub struct SeparableConv {
    pub depthwise: Var,
    pub depthwise_bias: Var,
    pub pointwise: Conv2d,
}

impl SeparableConv {
    pub fn new(vs: &mut Scope<'_>, in_ch: usize, out_ch: usize) -> Result<Self> {
        let bound = 1.0 / 3.0;
        Ok(Self {
            depthwise: vs.uniform("depthwise.weight", &[in_ch, 9], bound)?,
            depthwise_bias: vs.uniform("depthwise.bias", &[in_ch], bound)?,
            pointwise: Conv2d::new(&mut vs.pp("pointwise"), in_ch, out_ch, 1, 1, 0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let cols = im2col(x, 3, 1, 1)?.reshape((b, c, 9, h * w))?;
        let y = cols
            .broadcast_mul(&self.depthwise.reshape((1, c, 9, 1))?)?
            .sum(2)?
            .broadcast_add(&self.depthwise_bias.reshape((1, c, 1))?)?
            .reshape((b, c, h, w))?;
        self.pointwise.forward(&y)
    }
}
