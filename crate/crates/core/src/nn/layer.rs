use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Samples per work unit in the convolution kernels. Fixed so partial
/// gradient sums are grouped the same way for any worker count.
const CONV_CHUNK: usize = 16;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm normalizes with batch statistics.
    Train,
    /// Batch-norm normalizes with its running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T = f32> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Dense(Dense<T>),
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    MaxPool { size: usize },
    Flatten,
}

/// Per-layer state kept by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    None,
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch mean and biased batch variance per channel (train mode only).
        batch_stats: Option<(Vec<T>, Vec<T>)>,
    },
    Pool {
        argmax: Vec<u32>,
    },
}

impl<T: Scalar> Dense<T> {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k || self.stride == 0 {
            return None;
        }
        Some(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], T::one()),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
            momentum: T::lit(BN_MOMENTUM),
            eps: T::lit(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Channel axis is 1; everything after it is spatial.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let s = shape[2..].iter().product();
    (n, c, s)
}

impl<T: Scalar> Layer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
        }
    }

    /// Output shape for one sample (no batch axis).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: String| Error::shape(format!("{} layer: {what}", self.kind_name()));
        match self {
            Layer::Dense(d) => {
                if input.len() != 1 || input[0] != d.in_features() {
                    return Err(bad(format!(
                        "expects [{}], got {input:?}",
                        d.in_features()
                    )));
                }
                Ok(vec![d.out_features()])
            }
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels() {
                    return Err(bad(format!(
                        "expects [{}, H, W], got {input:?}",
                        c.in_channels()
                    )));
                }
                let (ho, wo) = c
                    .out_hw(input[1], input[2])
                    .ok_or_else(|| bad(format!("kernel does not fit {input:?}")))?;
                Ok(vec![c.out_channels(), ho, wo])
            }
            Layer::BatchNorm(b) => {
                if input.is_empty() || input[0] != b.channels() {
                    return Err(bad(format!(
                        "expects {} channels, got {input:?}",
                        b.channels()
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { size } => {
                if input.len() != 3 || *size == 0 || input[1] < *size || input[2] < *size {
                    return Err(bad(format!("window {size} does not fit {input:?}")));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Dense(d) => Layer::Dense(Dense {
                weight: d.weight.cast(),
                bias: d.bias.cast(),
            }),
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                stride: c.stride,
                padding: c.padding,
            }),
            Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                gamma: b.gamma.cast(),
                beta: b.beta.cast(),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
                momentum: U::lit(b.momentum.as_f64()),
                eps: U::lit(b.eps.as_f64()),
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool { size } => Layer::MaxPool { size: *size },
            Layer::Flatten => Layer::Flatten,
        }
    }

    /// Batched forward. `mask` only applies to `Relu` and zeroes whole
    /// channels (axis 1) of the output.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        mask: Option<&[bool]>,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let mut out_shape = vec![x.batch()];
        out_shape.extend(self.output_shape(&x.shape()[1..])?);
        match self {
            Layer::Dense(d) => Ok((dense_forward(d, x, out_shape), Cache::None)),
            Layer::Conv2d(c) => Ok((conv_forward(c, x, out_shape), Cache::None)),
            Layer::BatchNorm(b) => {
                if mode == Mode::Train && x.batch() * x.sample_len() / b.channels() < 2 {
                    return Err(Error::invalid(
                        "batch-norm in train mode needs at least two values per channel",
                    ));
                }
                Ok(bn_forward(b, x, mode))
            }
            Layer::Relu => {
                let (_, c, s) = channel_layout(x.shape());
                let mut y = x.clone();
                for (i, v) in y.data_mut().iter_mut().enumerate() {
                    let alive = mask.is_none_or(|m| m[(i / s) % c]);
                    if !alive || *v < T::zero() {
                        *v = T::zero();
                    }
                }
                Ok((y, Cache::None))
            }
            Layer::MaxPool { size } => {
                let (y, argmax) = pool_forward(*size, x, out_shape);
                Ok((y, Cache::Pool { argmax }))
            }
            Layer::Flatten => Ok((x.clone().reshape(out_shape)?, Cache::None)),
        }
    }

    /// Returns the gradient w.r.t. the layer input and the parameter
    /// gradients in [`Layer::params`] order.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &Cache<T>,
        dy: &Tensor<T>,
        mask: Option<&[bool]>,
    ) -> (Tensor<T>, Vec<Tensor<T>>) {
        match (self, cache) {
            (Layer::Dense(d), _) => dense_backward(d, x, dy),
            (Layer::Conv2d(c), _) => conv_backward(c, x, dy),
            (Layer::BatchNorm(b), Cache::Norm { xhat, inv_std, batch_stats }) => {
                bn_backward(b, x.shape(), xhat, inv_std, batch_stats.is_some(), dy)
            }
            (Layer::Relu, _) => {
                let (_, c, s) = channel_layout(x.shape());
                let mut dx = dy.clone();
                for (i, (g, &xv)) in dx.data_mut().iter_mut().zip(x.data()).enumerate() {
                    let alive = mask.is_none_or(|m| m[(i / s) % c]);
                    if !alive || xv <= T::zero() {
                        *g = T::zero();
                    }
                }
                (dx, Vec::new())
            }
            (Layer::MaxPool { .. }, Cache::Pool { argmax }) => {
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let d = dx.data_mut();
                for (g, &src) in dy.data().iter().zip(argmax) {
                    d[src as usize] += *g;
                }
                (dx, Vec::new())
            }
            (Layer::Flatten, _) => (
                dy.clone()
                    .reshape(x.shape().to_vec())
                    .expect("flatten preserves volume"),
                Vec::new(),
            ),
            _ => unreachable!("cache kind does not match layer"),
        }
    }
}

fn dense_forward<T: Scalar>(d: &Dense<T>, x: &Tensor<T>, out_shape: Vec<usize>) -> Tensor<T> {
    let (n, fin, fout) = (x.batch(), d.in_features(), d.out_features());
    let mut y = Tensor::zeros(out_shape);
    T::gemm(n, fin, fout, x.data(), false, d.weight.data(), true, T::zero(), y.data_mut());
    let b = d.bias.data();
    for row in y.data_mut().chunks_mut(fout) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

fn dense_backward<T: Scalar>(
    d: &Dense<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let (n, fin, fout) = (x.batch(), d.in_features(), d.out_features());
    let mut dw = Tensor::zeros([fout, fin]);
    T::gemm(fout, n, fin, dy.data(), true, x.data(), false, T::zero(), dw.data_mut());
    let mut db = Tensor::zeros([fout]);
    for row in dy.data().chunks(fout) {
        for (g, &v) in db.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dx = Tensor::zeros(x.shape().to_vec());
    T::gemm(n, fout, fin, dy.data(), false, d.weight.data(), false, T::zero(), dx.data_mut());
    (dx, vec![dw, db])
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(conv: &Conv2d<T>, in_shape: &[usize]) -> Self {
        let (h, w) = (in_shape[2], in_shape[3]);
        let (ho, wo) = conv.out_hw(h, w).expect("validated by output_shape");
        Self {
            c: in_shape[1],
            h,
            w,
            k: conv.kernel(),
            stride: conv.stride,
            pad: conv.padding,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for column-matrix entry (row, position), if inside the image.
    #[inline]
    fn source(&self, kr: usize, kc: usize, oh: usize, ow: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride + kr) as isize - self.pad as isize;
        let iw = (ow * self.stride + kc) as isize - self.pad as isize;
        (ih >= 0 && iw >= 0 && (ih as usize) < self.h && (iw as usize) < self.w)
            .then_some((ih as usize, iw as usize))
    }

    /// Columns for `samples` (each `c·h·w` long) laid side by side:
    /// `[rows, samples.len() · positions]`.
    fn im2col<T: Scalar>(&self, samples: &[T], count: usize) -> Vec<T> {
        let (p, hw, width) = (self.positions(), self.h * self.w, count * self.positions());
        let mut cols = vec![T::zero(); self.rows() * width];
        for ch in 0..self.c {
            for kr in 0..self.k {
                for kc in 0..self.k {
                    let row = (ch * self.k + kr) * self.k + kc;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for b in 0..count {
                        let img = &samples[b * self.c * hw + ch * hw..][..hw];
                        for oh in 0..self.ho {
                            for ow in 0..self.wo {
                                if let Some((ih, iw)) = self.source(kr, kc, oh, ow) {
                                    dst[b * p + oh * self.wo + ow] = img[ih * self.w + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], count: usize, out: &mut [T]) {
        let (p, hw, width) = (self.positions(), self.h * self.w, count * self.positions());
        for ch in 0..self.c {
            for kr in 0..self.k {
                for kc in 0..self.k {
                    let row = (ch * self.k + kr) * self.k + kc;
                    let src = &cols[row * width..(row + 1) * width];
                    for b in 0..count {
                        let img = &mut out[b * self.c * hw + ch * hw..][..hw];
                        for oh in 0..self.ho {
                            for ow in 0..self.wo {
                                if let Some((ih, iw)) = self.source(kr, kc, oh, ow) {
                                    img[ih * self.w + iw] += src[b * p + oh * self.wo + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(conv: &Conv2d<T>, x: &Tensor<T>, out_shape: Vec<usize>) -> Tensor<T> {
    let g = ConvGeom::new(conv, x.shape());
    let (o, p, in_len) = (conv.out_channels(), g.positions(), x.sample_len());
    let mut y = Tensor::zeros(out_shape);
    let out_len = o * p;
    par::for_each_chunk(y.data_mut(), CONV_CHUNK * out_len, |ci, out| {
        let count = out.len() / out_len;
        let start = ci * CONV_CHUNK;
        let cols = g.im2col(&x.data()[start * in_len..(start + count) * in_len], count);
        let width = count * p;
        let mut prod = vec![T::zero(); o * width];
        T::gemm(o, g.rows(), width, conv.weight.data(), false, &cols, false, T::zero(), &mut prod);
        for b in 0..count {
            for oc in 0..o {
                let bias = conv.bias.data()[oc];
                let src = &prod[oc * width + b * p..][..p];
                let dst = &mut out[b * out_len + oc * p..][..p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
    });
    y
}

fn conv_backward<T: Scalar>(
    conv: &Conv2d<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let g = ConvGeom::new(conv, x.shape());
    let (n, o, p, in_len) = (x.batch(), conv.out_channels(), g.positions(), x.sample_len());
    let rows = g.rows();
    let out_len = o * p;
    let chunks = n.div_ceil(CONV_CHUNK);
    let parts = par::map(chunks, |ci| {
        let start = ci * CONV_CHUNK;
        let count = CONV_CHUNK.min(n - start);
        let width = count * p;
        let cols = g.im2col(&x.data()[start * in_len..(start + count) * in_len], count);
        // dy for this chunk as [o, count·p]
        let mut dmat = vec![T::zero(); o * width];
        let mut db = vec![T::zero(); o];
        for b in 0..count {
            let src = &dy.data()[(start + b) * out_len..][..out_len];
            for oc in 0..o {
                let s = &src[oc * p..][..p];
                dmat[oc * width + b * p..][..p].copy_from_slice(s);
                db[oc] += s.iter().copied().sum();
            }
        }
        let mut dw = vec![T::zero(); o * rows];
        T::gemm(o, width, rows, &dmat, false, &cols, true, T::zero(), &mut dw);
        let mut dcols = vec![T::zero(); rows * width];
        T::gemm(rows, o, width, conv.weight.data(), true, &dmat, false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); count * in_len];
        g.col2im(&dcols, count, &mut dx);
        (dw, db, dx)
    });
    let mut dw = Tensor::zeros(conv.weight.shape().to_vec());
    let mut db = Tensor::zeros([o]);
    let mut dx = Vec::with_capacity(n * in_len);
    for (pw, pb, px) in parts {
        for (a, b) in dw.data_mut().iter_mut().zip(&pw) {
            *a += *b;
        }
        for (a, b) in db.data_mut().iter_mut().zip(&pb) {
            *a += *b;
        }
        dx.extend(px);
    }
    let dx = Tensor::new(x.shape().to_vec(), dx).expect("chunked gradient covers input");
    (dx, vec![dw, db])
}

/// Per-channel mean and biased variance, accumulated in f64.
pub(crate) fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, c, s) = channel_layout(x.shape());
    let count = (n * s) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            acc += d[(b * c + ch) * s..][..s].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = acc / count;
        let mut sq = 0.0;
        for b in 0..n {
            sq += d[(b * c + ch) * s..][..s]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

fn bn_forward<T: Scalar>(bn: &BatchNorm<T>, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Cache<T>) {
    let (n, c, s) = channel_layout(x.shape());
    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            let (m, v) = channel_stats(x);
            let mt: Vec<T> = m.iter().map(|&v| T::lit(v)).collect();
            let vt: Vec<T> = v.iter().map(|&v| T::lit(v)).collect();
            (mt.clone(), vt.clone(), Some((mt, vt)))
        }
        Mode::Eval => (
            bn.running_mean.data().to_vec(),
            bn.running_var.data().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + bn.eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape().to_vec());
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let (g, be) = (bn.gamma.data()[ch], bn.beta.data()[ch]);
            for i in base..base + s {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y.data_mut()[i] = g * h + be;
            }
        }
    }
    (
        y,
        Cache::Norm {
            xhat,
            inv_std,
            batch_stats,
        },
    )
}

fn bn_backward<T: Scalar>(
    bn: &BatchNorm<T>,
    shape: &[usize],
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let (n, c, s) = channel_layout(shape);
    let m = T::lit((n * s) as f64);
    let mut dgamma = Tensor::zeros([c]);
    let mut dbeta = Tensor::zeros([c]);
    let mut dx = Tensor::zeros(shape.to_vec());
    let dyd = dy.data();
    for ch in 0..c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                sg += dyd[i] * xhat[i];
                sb += dyd[i];
            }
        }
        dgamma.data_mut()[ch] = sg;
        dbeta.data_mut()[ch] = sb;
        let g = bn.gamma.data()[ch];
        let scale = g * inv_std[ch];
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                dx.data_mut()[i] = if train {
                    // sum(dxhat) = g·sb, sum(dxhat·xhat) = g·sg
                    scale / m * (m * dyd[i] - sb - xhat[i] * sg)
                } else {
                    scale * dyd[i]
                };
            }
        }
    }
    (dx, vec![dgamma, dbeta])
}

fn pool_forward<T: Scalar>(size: usize, x: &Tensor<T>, out_shape: Vec<usize>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let mut y = Tensor::zeros(out_shape);
    let mut argmax = vec![0u32; y.len()];
    let d = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * size * w + ow * size;
                for dr in 0..size {
                    for dc in 0..size {
                        let i = base + (oh * size + dr) * w + ow * size + dc;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                }
                y.data_mut()[o] = d[best];
                argmax[o] = best as u32;
                o += 1;
            }
        }
    }
    (y, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn output_shapes() {
        let conv = Layer::<f64>::Conv2d(Conv2d {
            weight: Tensor::zeros([4, 3, 3, 3]),
            bias: Tensor::zeros([4]),
            stride: 2,
            padding: 1,
        });
        assert_eq!(conv.output_shape(&[3, 16, 16]).unwrap(), vec![4, 8, 8]);
        assert!(conv.output_shape(&[2, 16, 16]).is_err());
        let pool = Layer::<f64>::MaxPool { size: 2 };
        assert_eq!(pool.output_shape(&[4, 5, 5]).unwrap(), vec![4, 2, 2]);
        assert!(pool.output_shape(&[4, 1, 5]).is_err());
        assert_eq!(Layer::<f64>::Flatten.output_shape(&[4, 2, 2]).unwrap(), vec![16]);
        let err = Layer::<f64>::BatchNorm(BatchNorm::new(3)).output_shape(&[4, 2, 2]).unwrap_err();
        assert!(err.to_string().contains("batchnorm"));
    }

    #[test]
    fn relu_mask_zeroes_whole_channels() {
        let x = t(&[1, 2, 1, 2], &[1.0, -1.0, 2.0, 3.0]);
        let (y, _) = Layer::Relu.forward(&x, Mode::Eval, Some(&[true, false])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0, 0.0]);
        let (y, _) = Layer::Relu.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 2.0, 3.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_the_maximum() {
        let x = t(&[1, 1, 2, 2], &[0.1, 0.7, 0.3, 0.2]);
        let pool = Layer::MaxPool { size: 2 };
        let (y, cache) = pool.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(y.data(), &[0.7]);
        let (dx, grads) = pool.backward(&x, &cache, &t(&[1, 1, 1, 1], &[2.0]), None);
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
        assert!(grads.is_empty());
    }

    #[test]
    fn batchnorm_modes() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.running_mean = t(&[1], &[1.0]);
        bn.running_var = t(&[1], &[4.0]);
        bn.eps = 0.0;
        let layer = Layer::BatchNorm(bn);
        let x = t(&[2, 1], &[1.0, 3.0]);
        let (eval, _) = layer.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(eval.data(), &[0.0, 1.0]);
        let (train, _) = layer.forward(&x, Mode::Train, None).unwrap();
        assert_eq!(train.data(), &[-1.0, 1.0]);
        assert!(layer.forward(&t(&[1, 1], &[1.0]), Mode::Train, None).is_err());
    }

    #[test]
    fn cast_round_trip_keeps_values() {
        let layer = Layer::<f64>::Dense(Dense {
            weight: t(&[1, 2], &[0.5, -0.25]),
            bias: t(&[1], &[0.125]),
        });
        assert_eq!(layer.cast::<f32>().cast::<f64>(), layer);
    }
}
