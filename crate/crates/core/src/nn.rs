//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted module path. Layers
//! hold handles to the stored tensors, so an optimizer update through the
//! store is visible to every layer without rebuilding.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only; forward passes are pure.
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Named trainable parameters plus non-trainable buffers.
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
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

    fn sample(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n)
                .map(|_| self.rng.random_range(-b..=b) as f32)
                .collect(),
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?)
    }

    fn get_or_init(
        &mut self,
        name: String,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<Tensor> {
        let existing = if trainable {
            self.params.get(&name)
        } else {
            self.buffers.get(&name)
        };
        if let Some(v) = existing {
            if v.dims() != shape {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{name}: stored shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let var = Var::from_tensor(&self.sample(shape, init)?)?;
        let t = var.as_tensor().clone();
        if trainable {
            self.params.insert(name, var);
        } else {
            self.buffers.insert(name, var);
        }
        Ok(t)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    /// Inserts a tensor verbatim, used when restoring a checkpoint.
    pub fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> Result<()> {
        let var = Var::from_tensor(&value)?;
        if trainable {
            self.params.insert(name, var);
        } else {
            self.buffers.insert(name, var);
        }
        Ok(())
    }

    /// Independent copy: new storage for every tensor.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(Self {
            params: copy(&self.params)?,
            buffers: copy(&self.buffers)?,
            rng: self.rng.clone(),
            device: self.device.clone(),
        })
    }

    pub fn n_trainable(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }
}

/// A path prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let path = self.path(name);
        self.store.get_or_init(path, shape, init, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let path = self.path(name);
        self.store.get_or_init(path, shape, init, false)
    }
}

fn fan_in_bound(fan_in: usize) -> Init {
    Init::Uniform(1.0 / (fan_in as f64).sqrt())
}

/// Affine map over the last dimension. Weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope<'_>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = s.param("weight", &[d_in, d_out], fan_in_bound(d_in))?;
        let bias = if bias {
            Some(s.param("bias", &[d_out], fan_in_bound(d_in))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        Ok(match &self.bias {
            Some(b) => add_bias(&y, b)?,
            None => y,
        })
    }
}

/// Patch geometry shared by the im2col/col2im pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Patches {
    channels: usize,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride_h: usize,
    stride_w: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Patches {
    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn cols_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w * self.out_h * self.out_w
    }

    /// Calls `f(image_index, column_index)` for every in-bounds tap of one
    /// batch element.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_h, self.out_w);
        let k_len = self.channels * self.kernel_h * self.kernel_w;
        for c in 0..self.channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride_h + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let img_row = (c * self.height + iy as usize) * self.width;
                        for ox in 0..ow {
                            let ix = (ox * self.stride_w + kx) as isize - self.pad_w as isize;
                            if ix >= 0 && ix < self.width as isize {
                                f(img_row + ix as usize, (oy * ow + ox) * k_len + row);
                            }
                        }
                    }
                }
            }
        }
    }

    fn gather<T: Copy + Default>(&self, image: &[T], batch: usize) -> Vec<T> {
        let (il, cl) = (self.image_len(), self.cols_len());
        let mut out = vec![T::default(); batch * cl];
        for b in 0..batch {
            let (src, dst) = (&image[b * il..(b + 1) * il], &mut out[b * cl..(b + 1) * cl]);
            self.for_each_tap(|i, j| dst[j] = src[i]);
        }
        out
    }

    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T], batch: usize) -> Vec<T> {
        let (il, cl) = (self.image_len(), self.cols_len());
        let mut out = vec![T::default(); batch * il];
        for b in 0..batch {
            let (src, dst) = (&cols[b * cl..(b + 1) * cl], &mut out[b * il..(b + 1) * il]);
            self.for_each_tap(|i, j| dst[i] += src[j]);
        }
        out
    }
}

pub(crate) fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => Err(candle_core::Error::Msg(
            "patch op expects contiguous input".into(),
        )),
    }
}

/// `[B, C, H, W] -> [B*Ho*Wo, C*kh*kw]`, one row per output position.
struct Im2Col(Patches);

/// Adjoint of [`Im2Col`]: sums columns back into the image.
struct Col2Im(Patches);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = &self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(p.gather(contiguous_slice(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(p.gather(contiguous_slice(v, layout)?, batch)),
            _ => {
                return Err(candle_core::Error::Msg(
                    "im2col supports f32 and f64 only".into(),
                ))
            }
        };
        let shape = Shape::from((
            batch * p.out_h * p.out_w,
            p.channels * p.kernel_h * p.kernel_w,
        ));
        Ok((out, shape))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let image = grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?;
        Ok(Some(image.reshape(arg.shape())?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = &self.0;
        let batch = layout.dims()[0] / (p.out_h * p.out_w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(p.scatter(contiguous_slice(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(p.scatter(contiguous_slice(v, layout)?, batch)),
            _ => {
                return Err(candle_core::Error::Msg(
                    "col2im supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, Shape::from((batch, p.channels, p.height, p.width))))
    }
}

/// `x[G, R, C] + bias[G, C]` broadcast over the middle axis, with a
/// contiguous row sum for the bias gradient.
struct BiasAdd {
    groups: usize,
}

/// `[G, R, C] -> [G, C]` sums over the middle axis.
struct RowSum {
    groups: usize,
}

fn add_rows<T: Copy + std::ops::Add<Output = T>>(x: &[T], bias: &[T], groups: usize) -> Vec<T> {
    let c = bias.len() / groups;
    let per_group = x.len() / groups;
    let mut out = Vec::with_capacity(x.len());
    for (g, block) in x.chunks_exact(per_group).enumerate() {
        let b = &bias[g * c..(g + 1) * c];
        for row in block.chunks_exact(c) {
            out.extend(row.iter().zip(b).map(|(a, b)| *a + *b));
        }
    }
    out
}

fn row_sums<T: Copy + std::ops::AddAssign>(x: &[T], groups: usize, c: usize) -> Vec<T> {
    let per_group = x.len() / groups;
    let mut out = Vec::with_capacity(groups * c);
    for block in x.chunks_exact(per_group) {
        let mut acc = block[..c].to_vec();
        for row in block.chunks_exact(c).skip(1) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
        }
        out.extend(acc);
    }
    out
}

impl candle_core::CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.groups;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(add_rows(
                contiguous_slice(x, l1)?,
                contiguous_slice(b, l2)?,
                g,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(add_rows(
                contiguous_slice(x, l1)?,
                contiguous_slice(b, l2)?,
                g,
            )),
            _ => {
                return Err(candle_core::Error::Msg(
                    "bias-add supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let c = bias.elem_count() / self.groups;
        let rows = grad.elem_count() / (self.groups * c);
        let gb = grad
            .contiguous()?
            .reshape((self.groups, rows, c))?
            .apply_op1_no_bwd(&RowSum {
                groups: self.groups,
            })?
            .reshape(bias.shape())?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

impl CustomOp1 for RowSum {
    fn name(&self) -> &'static str {
        "row-sum"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (g, c) = (self.groups, layout.dims()[2]);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(row_sums(contiguous_slice(v, layout)?, g, c)),
            CpuStorage::F64(v) => CpuStorage::F64(row_sums(contiguous_slice(v, layout)?, g, c)),
            _ => {
                return Err(candle_core::Error::Msg(
                    "row-sum supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, Shape::from((g, c))))
    }
}

/// Adds a per-channel bias `[C]` along the last dimension.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *x.dims().last().expect("bias-add on a scalar");
    if bias.elem_count() != c || x.elem_count() == 0 {
        return Ok(x.broadcast_add(bias)?);
    }
    Ok(x.contiguous()?
        .apply_op2(&bias.contiguous()?, BiasAdd { groups: 1 })?)
}

/// `x[B, T, C] + v[B, C]`, the same vector at every step of a sequence.
pub fn add_per_sequence(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    if v.dims() != [b, c] {
        return Ok(x.broadcast_add(&v.unsqueeze(1)?)?);
    }
    Ok(x.contiguous()?
        .apply_op2(&v.contiguous()?, BiasAdd { groups: b })?)
}

/// `x[.., K] @ w[K, N]` with the leading dims folded into one matmul.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.rank() == 2 {
        return Ok(x.matmul(w)?);
    }
    let dims = x.dims().to_vec();
    let k = dims[dims.len() - 1];
    let rows = x.elem_count() / k;
    let y = x.contiguous()?.reshape((rows, k))?.matmul(w)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = w.dim(1)?;
    Ok(y.reshape(out_dims)?)
}

fn im2col(x: &Tensor, p: Patches) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col(p))?)
}

/// 2-D convolution lowered to patch extraction plus a matmul.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        s: &mut Scope<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = s.param("weight", &[c_out, fan_in], fan_in_bound(fan_in))?;
        let bias = s.param("bias", &[c_out], fan_in_bound(fan_in))?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// `[B, C, H, W] -> [B, C_out, H_out, W_out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let cols = im2col(
            x,
            Patches {
                channels: c,
                height: h,
                width: w,
                kernel_h: self.kernel,
                kernel_w: self.kernel,
                stride_h: self.stride,
                stride_w: self.stride,
                pad_h: self.padding,
                pad_w: self.padding,
                out_h: ho,
                out_w: wo,
            },
        )?;
        let y = add_bias(&cols.matmul(&self.weight.t()?)?, &self.bias)?;
        Ok(y.reshape((b, ho, wo, ()))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }
}

/// Length-preserving 1-D convolution over `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    weight: Tensor,
    bias: Option<Tensor>,
    kernel: usize,
}

impl Conv1d {
    pub fn new(
        s: &mut Scope<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        assert!(kernel % 2 == 1, "same-padding conv needs an odd kernel");
        let fan_in = c_in * kernel;
        let weight = s.param("weight", &[c_out, fan_in], fan_in_bound(fan_in))?;
        let bias = if bias {
            Some(s.param("bias", &[c_out], fan_in_bound(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
        })
    }

    /// Weight as `[C_out, C_in * kernel]`.
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Patch rows `[B * L, C * kernel]` matching [`Conv1d::weight`] columns.
    pub fn columns(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, l) = x.dims3()?;
        let k = self.kernel;
        im2col(
            x,
            Patches {
                channels: c,
                height: 1,
                width: l,
                kernel_h: 1,
                kernel_w: k,
                stride_h: 1,
                stride_w: 1,
                pad_h: 0,
                pad_w: k / 2,
                out_h: 1,
                out_w: l,
            },
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, l) = x.dims3()?;
        let k = self.kernel;
        let cols = im2col(
            x,
            Patches {
                channels: c,
                height: 1,
                width: l,
                kernel_h: 1,
                kernel_w: k,
                stride_h: 1,
                stride_w: 1,
                pad_h: 0,
                pad_w: k / 2,
                out_h: 1,
                out_w: l,
            },
        )?;
        let mut y = cols.matmul(&self.weight.t()?)?;
        if let Some(bias) = &self.bias {
            y = add_bias(&y, bias)?;
        }
        Ok(y.reshape((b, l, ()))?.transpose(1, 2)?.contiguous()?)
    }
}

/// Batch normalization over dimension 1 of a `[B, C, ...]` tensor.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    channels: usize,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

pub(crate) trait Real: Copy + Default {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Per-channel mean and biased variance of `[B, C, rest]` data.
fn channel_stats<T: Real>(x: &[T], channels: usize, rest: usize) -> (Vec<f64>, Vec<f64>) {
    let batch = x.len() / (channels * rest);
    let n = (batch * rest) as f64;
    let mut mean = vec![0f64; channels];
    let mut var = vec![0f64; channels];
    for b in 0..batch {
        for (c, m) in mean.iter_mut().enumerate() {
            let row = &x[(b * channels + c) * rest..][..rest];
            *m += row.iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for b in 0..batch {
        for c in 0..channels {
            let row = &x[(b * channels + c) * rest..][..rest];
            var[c] += row
                .iter()
                .map(|v| (v.to_f64() - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Training-mode batch norm on `(x, gamma, beta)` with a fused backward.
struct BatchNormTrain {
    channels: usize,
}

impl BatchNormTrain {
    fn rest(&self, layout: &Layout) -> usize {
        layout.shape().elem_count() / (layout.dims()[0] * self.channels)
    }

    fn forward<T: Real>(&self, x: &[T], gamma: &[T], beta: &[T], rest: usize) -> Vec<T> {
        let c_n = self.channels;
        let (mean, var) = channel_stats(x, c_n, rest);
        let mut out = vec![T::default(); x.len()];
        for (i, chunk) in x.chunks(rest).enumerate() {
            let c = i % c_n;
            let scale = gamma[c].to_f64() / (var[c] + BN_EPS).sqrt();
            let shift = beta[c].to_f64() - mean[c] * scale;
            for (o, v) in out[i * rest..][..rest].iter_mut().zip(chunk) {
                *o = T::from_f64(v.to_f64() * scale + shift);
            }
        }
        out
    }

    /// Returns `(dx, dgamma, dbeta)`.
    fn backward<T: Real>(
        &self,
        x: &[T],
        gamma: &[T],
        dy: &[T],
        rest: usize,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let c_n = self.channels;
        let (mean, var) = channel_stats(x, c_n, rest);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let n = (x.len() / c_n) as f64;
        let mut dbeta = vec![0f64; c_n];
        let mut dgamma = vec![0f64; c_n];
        for (i, (xs, gs)) in x.chunks(rest).zip(dy.chunks(rest)).enumerate() {
            let c = i % c_n;
            for (v, g) in xs.iter().zip(gs) {
                let g = g.to_f64();
                dbeta[c] += g;
                dgamma[c] += g * (v.to_f64() - mean[c]) * inv[c];
            }
        }
        let mut dx = vec![T::default(); x.len()];
        for (i, (xs, gs)) in x.chunks(rest).zip(dy.chunks(rest)).enumerate() {
            let c = i % c_n;
            let k = gamma[c].to_f64() * inv[c] / n;
            for ((o, v), g) in dx[i * rest..][..rest].iter_mut().zip(xs).zip(gs) {
                let xhat = (v.to_f64() - mean[c]) * inv[c];
                *o = T::from_f64(k * (n * g.to_f64() - dbeta[c] - xhat * dgamma[c]));
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
        (dx, cast(dgamma), cast(dbeta))
    }
}

impl candle_core::CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        x: &CpuStorage,
        lx: &Layout,
        gamma: &CpuStorage,
        lg: &Layout,
        beta: &CpuStorage,
        lb: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let rest = self.rest(lx);
        let out = match (x, gamma, beta) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.forward(
                    contiguous_slice(x, lx)?,
                    contiguous_slice(g, lg)?,
                    contiguous_slice(b, lb)?,
                    rest,
                ))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.forward(
                    contiguous_slice(x, lx)?,
                    contiguous_slice(g, lg)?,
                    contiguous_slice(b, lb)?,
                    rest,
                ))
            }
            _ => {
                return Err(candle_core::Error::Msg(
                    "batch norm supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, lx.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let rest = x.elem_count() / (x.dim(0)? * self.channels);
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let xs = x.flatten_all()?.to_vec1::<$t>()?;
                let gs = gamma.to_vec1::<$t>()?;
                let dy = grad.flatten_all()?.to_vec1::<$t>()?;
                let (dx, dg, db) = self.backward(&xs, &gs, &dy, rest);
                (
                    Tensor::from_vec(dx, x.shape(), dev)?,
                    Tensor::from_vec(dg, self.channels, dev)?,
                    Tensor::from_vec(db, self.channels, dev)?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F64 => run!(f64),
            _ => run!(f32),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

impl BatchNorm {
    pub fn new(s: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("gamma", &[channels], Init::Ones)?,
            beta: s.param("beta", &[channels], Init::Zeros)?,
            running_mean: s.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: s.buffer("running_var", &[channels], Init::Ones)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let x = x.contiguous()?;
                let rest = x.elem_count() / (x.dim(0)? * self.channels);
                let (mean, var) = match x.dtype() {
                    DType::F64 => {
                        channel_stats(&x.flatten_all()?.to_vec1::<f64>()?, self.channels, rest)
                    }
                    _ => channel_stats(&x.flatten_all()?.to_vec1::<f32>()?, self.channels, rest),
                };
                let n = (x.elem_count() / self.channels) as f64;
                let unbias = n / (n - 1.0).max(1.0);
                let update = |running: &Tensor, batch: &[f64], factor: f64| -> Result<()> {
                    let old = running.to_vec1::<f32>()?;
                    let new: Vec<f32> = old
                        .iter()
                        .zip(batch)
                        .map(|(o, b)| {
                            ((1.0 - BN_MOMENTUM) * *o as f64 + BN_MOMENTUM * b * factor) as f32
                        })
                        .collect();
                    running.slice_set(
                        &Tensor::from_vec(new, self.channels, running.device())?,
                        0,
                        0,
                    )?;
                    Ok(())
                };
                update(&self.running_mean, &mean, 1.0)?;
                update(&self.running_var, &var, unbias)?;
                let gamma = self.gamma.to_dtype(x.dtype())?;
                let beta = self.beta.to_dtype(x.dtype())?;
                Ok(x.apply_op3(
                    &gamma,
                    &beta,
                    BatchNormTrain {
                        channels: self.channels,
                    },
                )?)
            }
            Mode::Eval => {
                let mut bshape = vec![1usize; x.rank()];
                bshape[1] = self.channels;
                let scale = (&self.gamma / (&self.running_var + BN_EPS)?.sqrt()?)?;
                let shift = (&self.beta - (&self.running_mean * &scale)?)?;
                let scale = scale.to_dtype(x.dtype())?.reshape(bshape.clone())?;
                let shift = shift.to_dtype(x.dtype())?.reshape(bshape)?;
                Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
            }
        }
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(s: &mut Scope<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("gamma", &[dim], Init::Ones)?,
            beta: s.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        add_bias(&normed.broadcast_mul(&self.gamma)?, &self.beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(s: &mut Scope<'_>, n: usize, dim: usize) -> Result<Self> {
        let bound = (3.0 / dim as f64).sqrt();
        Ok(Self {
            table: s.param("table", &[n, dim], Init::Uniform(bound))?,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    /// `[B, L]` u32 ids -> `[B, L, dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let shape = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        let mut out_shape = shape;
        out_shape.push(self.table.dim(1)?);
        Ok(rows.reshape(out_shape)?)
    }
}

/// Gated recurrent unit cell with the standard reset-gate placement.
#[derive(Clone, Debug)]
pub struct GruCell {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    hidden: usize,
}

impl GruCell {
    pub fn new(s: &mut Scope<'_>, d_in: usize, hidden: usize) -> Result<Self> {
        let init = fan_in_bound(hidden);
        Ok(Self {
            w_ih: s.param("w_ih", &[d_in, 3 * hidden], init)?,
            w_hh: s.param("w_hh", &[hidden, 3 * hidden], init)?,
            b_ih: s.param("b_ih", &[3 * hidden], init)?,
            b_hh: s.param("b_hh", &[3 * hidden], init)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Input-side gate pre-activations for a whole `[B, T, in]` sequence.
    pub fn input_gates(&self, xs: &Tensor) -> Result<Tensor> {
        add_bias(&matmul_last(xs, &self.w_ih)?, &self.b_ih)
    }

    /// One step from precomputed input gates `[B, 3H]`.
    pub fn step_gates(&self, gi: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gh = add_bias(&h.matmul(&self.w_hh)?, &self.b_hh)?;
        Ok(gi.contiguous()?.apply_op3(
            &gh,
            &h.contiguous()?,
            GruUpdate {
                hidden: self.hidden,
            },
        )?)
    }

    pub fn input_weight(&self) -> &Tensor {
        &self.w_ih
    }

    pub fn input_bias(&self) -> &Tensor {
        &self.b_ih
    }

    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gi = add_bias(&x.matmul(&self.w_ih)?, &self.b_ih)?;
        self.step_gates(&gi, h)
    }

    pub fn zeros(&self, batch: usize, device: &Device) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, self.hidden), DType::F32, device)?)
    }

    /// Runs over `[B, T, in]`. `lengths` freezes each row's state after its
    /// last valid step; `reverse` scans from the end. Returns every state
    /// `[B, T, H]` and the final state `[B, H]`.
    pub fn run(
        &self,
        xs: &Tensor,
        lengths: Option<&[usize]>,
        reverse: bool,
    ) -> Result<(Tensor, Tensor)> {
        let (b, t, _) = xs.dims3()?;
        let gates = self.input_gates(xs)?;
        let mut h = self.zeros(b, xs.device())?;
        let mut states = vec![None; t];
        let masks = match lengths {
            Some(lens) if lens.iter().any(|&l| l < t) => Some(step_masks(lens, t, xs.device())?),
            _ => None,
        };
        let order: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for step in order {
            let next = self.step_gates(&gates.narrow(1, step, 1)?.squeeze(1)?, &h)?;
            h = match &masks {
                Some(m) => {
                    let m = &m[step];
                    (&h + next.sub(&h)?.broadcast_mul(m)?)?
                }
                None => next,
            };
            states[step] = Some(h.clone());
        }
        let states: Vec<Tensor> = states.into_iter().map(|s| s.unwrap()).collect();
        Ok((Tensor::stack(&states, 1)?, h))
    }
}

/// GRU state update from input and hidden gate pre-activations
/// (`[r, z, n]` blocks of width H):
/// `r = σ(gi_r + gh_r)`, `z = σ(gi_z + gh_z)`, `n = tanh(gi_n + r·gh_n)`,
/// `h' = n + z·(h − n)`.
struct GruUpdate {
    hidden: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GruUpdate {
    fn forward<T: Real>(&self, gi: &[T], gh: &[T], h: &[T]) -> Vec<T> {
        let hd = self.hidden;
        let mut out = vec![T::default(); h.len()];
        for (row, o) in out.chunks_mut(hd).enumerate() {
            let (gi, gh, h) = (&gi[row * 3 * hd..], &gh[row * 3 * hd..], &h[row * hd..]);
            for j in 0..hd {
                let r = sigmoid(gi[j].to_f64() + gh[j].to_f64());
                let z = sigmoid(gi[hd + j].to_f64() + gh[hd + j].to_f64());
                let n = (gi[2 * hd + j].to_f64() + r * gh[2 * hd + j].to_f64()).tanh();
                o[j] = T::from_f64(n + z * (h[j].to_f64() - n));
            }
        }
        out
    }

    fn backward<T: Real>(&self, gi: &[T], gh: &[T], h: &[T], g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let hd = self.hidden;
        let mut dgi = vec![T::default(); gi.len()];
        let mut dgh = vec![T::default(); gh.len()];
        let mut dh = vec![T::default(); h.len()];
        for row in 0..h.len() / hd {
            let (o3, o1) = (row * 3 * hd, row * hd);
            for j in 0..hd {
                let ghn = gh[o3 + 2 * hd + j].to_f64();
                let r = sigmoid(gi[o3 + j].to_f64() + gh[o3 + j].to_f64());
                let z = sigmoid(gi[o3 + hd + j].to_f64() + gh[o3 + hd + j].to_f64());
                let n = (gi[o3 + 2 * hd + j].to_f64() + r * ghn).tanh();
                let (hv, gv) = (h[o1 + j].to_f64(), g[o1 + j].to_f64());
                let da_n = gv * (1.0 - z) * (1.0 - n * n);
                let da_z = gv * (hv - n) * z * (1.0 - z);
                let da_r = da_n * ghn * r * (1.0 - r);
                dgi[o3 + j] = T::from_f64(da_r);
                dgh[o3 + j] = T::from_f64(da_r);
                dgi[o3 + hd + j] = T::from_f64(da_z);
                dgh[o3 + hd + j] = T::from_f64(da_z);
                dgi[o3 + 2 * hd + j] = T::from_f64(da_n);
                dgh[o3 + 2 * hd + j] = T::from_f64(da_n * r);
                dh[o1 + j] = T::from_f64(gv * z);
            }
        }
        (dgi, dgh, dh)
    }
}

impl candle_core::CustomOp3 for GruUpdate {
    fn name(&self) -> &'static str {
        "gru-update"
    }

    fn cpu_fwd(
        &self,
        gi: &CpuStorage,
        li: &Layout,
        gh: &CpuStorage,
        lh: &Layout,
        h: &CpuStorage,
        ls: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (gi, gh, h) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(c)) => {
                CpuStorage::F32(self.forward(
                    contiguous_slice(a, li)?,
                    contiguous_slice(b, lh)?,
                    contiguous_slice(c, ls)?,
                ))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(c)) => {
                CpuStorage::F64(self.forward(
                    contiguous_slice(a, li)?,
                    contiguous_slice(b, lh)?,
                    contiguous_slice(c, ls)?,
                ))
            }
            _ => {
                return Err(candle_core::Error::Msg(
                    "gru update supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, ls.shape().clone()))
    }

    fn bwd(
        &self,
        gi: &Tensor,
        gh: &Tensor,
        h: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dev = h.device();
        macro_rules! run {
            ($t:ty) => {{
                let flat = |t: &Tensor| t.flatten_all().and_then(|t| t.to_vec1::<$t>());
                let (a, b, c) = self.backward(&flat(gi)?, &flat(gh)?, &flat(h)?, &flat(grad)?);
                (
                    Tensor::from_vec(a, gi.shape(), dev)?,
                    Tensor::from_vec(b, gh.shape(), dev)?,
                    Tensor::from_vec(c, h.shape(), dev)?,
                )
            }};
        }
        let (a, b, c) = match h.dtype() {
            DType::F64 => run!(f64),
            _ => run!(f32),
        };
        Ok((Some(a), Some(b), Some(c)))
    }
}

/// `[B, 1]` masks per time step: 1 where `step < length`.
fn step_masks(lengths: &[usize], t: usize, device: &Device) -> Result<Vec<Tensor>> {
    (0..t)
        .map(|step| {
            let m: Vec<f32> = lengths
                .iter()
                .map(|&l| if step < l { 1.0 } else { 0.0 })
                .collect();
            Ok(Tensor::from_vec(m, (lengths.len(), 1), device)?)
        })
        .collect()
}

/// Mean cross-entropy of `[B, K]` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let k = logits.dim(1)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidClassLabel {
            label: bad,
            n_classes: k,
        });
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (labels.len(), 1), logits.device())?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let picked = logp.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean binary cross-entropy with logits, stable form.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // max(x,0) - x*y + log(1 + exp(-|x|))
    let relu = logits.relu()?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let loss = ((relu - (logits * targets)?)? + soft)?;
    Ok(loss.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    /// Direct nested-loop convolution with the same weight layout.
    #[allow(clippy::too_many_arguments)]
    fn conv2d_loop(
        x: &[f32],
        (b, c, h, w): (usize, usize, usize, usize),
        weight: &[f32],
        bias: &[f32],
        c_out: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f32> {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0f32; b * c_out * ho * wo];
        for bi in 0..b {
            for o in 0..c_out {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bias[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let y = (i * s + ky) as isize - p as isize;
                                    let xx = (j * s + kx) as isize - p as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((bi * c + ci) * h + y as usize) * w + xx as usize];
                                    acc += xv * weight[o * c * k * k + ci * k * k + ky * k + kx];
                                }
                            }
                        }
                        out[((bi * c_out + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_loop_for_odd_and_even_sizes() {
        for &(h, w) in &[(7usize, 9usize), (8, 8), (1, 5), (3, 2), (80, 5)] {
            let mut store = ParamStore::new(11);
            let conv = Conv2d::new(&mut store.root().pp("c"), 2, 3, 3, 2, 1).unwrap();
            let n = 2 * 2 * h * w;
            let x: Vec<f32> = (0..n)
                .map(|i| ((i * 37) % 23) as f32 / 23.0 - 0.5)
                .collect();
            let xt = Tensor::from_vec(x.clone(), (2, 2, h, w), &dev()).unwrap();
            let y = conv.forward(&xt).unwrap();
            let wv = conv.weight.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let bv = conv.bias.to_vec1::<f32>().unwrap();
            let expect = conv2d_loop(&x, (2, 2, h, w), &wv, &bv, 3, 3, 2, 1);
            let got = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(y.dims()[2], conv.out_size(h));
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-5, "{h}x{w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv1d_matches_loop() {
        let mut store = ParamStore::new(2);
        let conv = Conv1d::new(&mut store.root(), 3, 4, 5, true).unwrap();
        let x: Vec<f32> = (0..2 * 3 * 6).map(|i| (i as f32 * 0.3).sin()).collect();
        let xt = Tensor::from_vec(x.clone(), (2, 3, 6), &dev()).unwrap();
        let got = conv
            .forward(&xt)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let wv = conv.weight.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bv = conv.bias.as_ref().unwrap().to_vec1::<f32>().unwrap();
        for b in 0..2 {
            for o in 0..4 {
                for t in 0..6 {
                    let mut acc = bv[o];
                    for c in 0..3 {
                        for j in 0..5 {
                            let src = t as isize + j as isize - 2;
                            if (0..6).contains(&src) {
                                acc += x[(b * 3 + c) * 6 + src as usize] * wv[o * 15 + c * 5 + j];
                            }
                        }
                    }
                    let g = got[(b * 4 + o) * 6 + t];
                    assert!((g - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv2d_gradient_has_input_shape() {
        let mut store = ParamStore::new(5);
        let conv = Conv2d::new(&mut store.root(), 1, 4, 3, 2, 1).unwrap();
        let x =
            Var::from_tensor(&Tensor::ones((2, 1, 80, 5), DType::F32, &dev()).unwrap()).unwrap();
        let loss = conv
            .forward(x.as_tensor())
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(x.as_tensor()).unwrap().dims(), &[2, 1, 80, 5]);
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for every geometry we use
        for (h, w, k, st, pad) in [
            (7, 5, 3, 2, 1),
            (1, 9, 1, 1, 0),
            (4, 4, 3, 1, 1),
            (1, 6, 5, 1, 2),
        ] {
            let p = Patches {
                channels: 2,
                height: h,
                width: w,
                kernel_h: k.min(h.max(1)),
                kernel_w: k,
                stride_h: st,
                stride_w: st,
                pad_h: if h == 1 { 0 } else { pad },
                pad_w: pad,
                out_h: 0,
                out_w: 0,
            };
            let p = Patches {
                out_h: (h + 2 * p.pad_h - p.kernel_h) / st + 1,
                out_w: (w + 2 * pad - k) / st + 1,
                ..p
            };
            let x: Vec<f64> = (0..3 * p.image_len())
                .map(|i| ((i * 37 % 11) as f64) - 5.0)
                .collect();
            let y: Vec<f64> = (0..3 * p.cols_len())
                .map(|i| ((i * 13 % 7) as f64) - 3.0)
                .collect();
            let lhs: f64 = p.gather(&x, 3).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(p.scatter(&y, 3)).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm::new(&mut store.root(), 2).unwrap();
        let x = Tensor::from_vec(vec![1f32, 2., 3., 4.], (2, 2), &dev()).unwrap();
        let y = bn
            .forward(&x, Mode::Eval)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        // running mean 0, var 1
        assert!((y[1][1] - 4.0 / (1.0f32 + 1e-5).sqrt()).abs() < 1e-5);
        let yt = bn
            .forward(&x, Mode::Train)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        assert!((yt[0][0] + yt[1][0]).abs() < 1e-5);
        let rm = store.buffers()["running_mean"]
            .as_tensor()
            .to_vec1::<f32>()
            .unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-6 && (rm[1] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn fused_batchnorm_matches_composite_ops() {
        let (b, c, h, w) = (3, 4, 2, 5);
        let vals = |n: usize, k: usize| -> Vec<f64> {
            (0..n)
                .map(|i| (((i * k + 3) % 17) as f64 - 8.0) / 4.0)
                .collect()
        };
        let x = Var::from_vec(vals(b * c * h * w, 7), (b, c, h, w), &dev()).unwrap();
        let gamma = Var::from_vec(vals(c, 5), c, &dev()).unwrap();
        let beta = Var::from_vec(vals(c, 3), c, &dev()).unwrap();
        let dy = Tensor::from_vec(vals(b * c * h * w, 11), (b, c, h, w), &dev()).unwrap();

        let fused = x
            .as_tensor()
            .apply_op3(
                gamma.as_tensor(),
                beta.as_tensor(),
                BatchNormTrain { channels: c },
            )
            .unwrap();
        let n = (b * h * w) as f64;
        let mean = (x.sum_keepdim(vec![0, 2, 3]).unwrap() / n).unwrap();
        let centred = x.broadcast_sub(&mean).unwrap();
        let var = (centred.sqr().unwrap().sum_keepdim(vec![0, 2, 3]).unwrap() / n).unwrap();
        let inv = (var + BN_EPS).unwrap().sqrt().unwrap().recip().unwrap();
        let composite = centred
            .broadcast_mul(&inv)
            .unwrap()
            .broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap();

        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let close = |a: Vec<f64>, b: Vec<f64>| {
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-10, "{p} vs {q}");
            }
        };
        close(flat(&fused), flat(&composite));
        let gf = (fused * &dy)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gc = (composite * &dy)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &gamma, &beta] {
            close(
                flat(gf.get(v.as_tensor()).unwrap()),
                flat(gc.get(v.as_tensor()).unwrap()),
            );
        }
    }

    #[test]
    fn fused_gru_update_matches_composite_ops() {
        let (b, hd) = (3, 4);
        let vals = |n: usize, k: usize| -> Vec<f64> {
            (0..n)
                .map(|i| (((i * k + 1) % 13) as f64 - 6.0) / 3.0)
                .collect()
        };
        let gi = Var::from_vec(vals(b * 3 * hd, 5), (b, 3 * hd), &dev()).unwrap();
        let gh = Var::from_vec(vals(b * 3 * hd, 7), (b, 3 * hd), &dev()).unwrap();
        let h = Var::from_vec(vals(b * hd, 3), (b, hd), &dev()).unwrap();
        let dy = Tensor::from_vec(vals(b * hd, 11), (b, hd), &dev()).unwrap();
        let fused = gi
            .as_tensor()
            .apply_op3(gh.as_tensor(), h.as_tensor(), GruUpdate { hidden: hd })
            .unwrap();
        let part = |t: &Var, i: usize| t.narrow(1, i * hd, hd).unwrap();
        let r = candle_nn::ops::sigmoid(&(part(&gi, 0) + part(&gh, 0)).unwrap()).unwrap();
        let z = candle_nn::ops::sigmoid(&(part(&gi, 1) + part(&gh, 1)).unwrap()).unwrap();
        let n = (part(&gi, 2) + (r * part(&gh, 2)).unwrap())
            .unwrap()
            .tanh()
            .unwrap();
        let composite = (&n + (z * (h.as_tensor() - &n).unwrap()).unwrap()).unwrap();
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let close = |a: Vec<f64>, b: Vec<f64>| {
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12, "{p} vs {q}");
            }
        };
        close(flat(&fused), flat(&composite));
        let gf = (fused * &dy)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gc = (composite * &dy)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&gi, &gh, &h] {
            close(
                flat(gf.get(v.as_tensor()).unwrap()),
                flat(gc.get(v.as_tensor()).unwrap()),
            );
        }
    }

    #[test]
    fn masked_gru_freezes_after_length() {
        let mut store = ParamStore::new(3);
        let gru = GruCell::new(&mut store.root(), 2, 3).unwrap();
        let xs: Vec<f32> = (0..2 * 4 * 2).map(|i| (i as f32 * 0.7).cos()).collect();
        let xs = Tensor::from_vec(xs, (2, 4, 2), &dev()).unwrap();
        let (states, last) = gru.run(&xs, Some(&[2, 4]), false).unwrap();
        let s = states.to_vec3::<f32>().unwrap();
        let l = last.to_vec2::<f32>().unwrap();
        assert_eq!(l[0], s[0][1]);
        assert_eq!(l[1], s[1][3]);
        let short = xs.narrow(0, 0, 1).unwrap().narrow(1, 0, 2).unwrap();
        let (_, last_short) = gru.run(&short, None, false).unwrap();
        let ls = last_short.to_vec2::<f32>().unwrap();
        for (a, b) in ls[0].iter().zip(&l[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros((1, 3), DType::F32, &dev()).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(Error::InvalidClassLabel {
                label: 3,
                n_classes: 3
            })
        ));
    }

    #[test]
    fn bce_matches_scalar_formula() {
        let x = [2.0f32, -1.5, 0.3];
        let y = [1.0f32, 0.0, 1.0];
        let xt = Tensor::new(&x, &dev()).unwrap();
        let yt = Tensor::new(&y, &dev()).unwrap();
        let got = bce_with_logits(&xt, &yt)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        let expect: f32 = x
            .iter()
            .zip(&y)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f32>()
            / 3.0;
        assert!((got - expect).abs() < 1e-6);
    }

    #[test]
    fn fused_bias_adds_match_broadcast_ops() {
        let vals = |n: usize, k: usize| -> Vec<f64> {
            (0..n)
                .map(|i| (((i * k + 1) % 13) as f64 - 6.0) / 3.0)
                .collect()
        };
        let x = Var::from_vec(vals(2 * 3 * 4, 5), (2, 3, 4), &dev()).unwrap();
        let bias = Var::from_vec(vals(4, 3), 4, &dev()).unwrap();
        let per_seq = Var::from_vec(vals(8, 7), (2, 4), &dev()).unwrap();
        let dy = Tensor::from_vec(vals(24, 11), (2, 3, 4), &dev()).unwrap();
        let fused = add_per_sequence(&add_bias(&x, &bias).unwrap(), &per_seq).unwrap();
        let plain = x
            .broadcast_add(&bias)
            .unwrap()
            .broadcast_add(&per_seq.unsqueeze(1).unwrap())
            .unwrap();
        let diff = |a: &Tensor, b: &Tensor| -> f64 {
            (a - b)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        assert!(diff(&fused, &plain) < 1e-12);
        let gf = (fused * &dy)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gp = (plain * &dy)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &bias, &per_seq] {
            assert!(diff(gf.get(v).unwrap(), gp.get(v).unwrap()) < 1e-12);
        }
    }
}
