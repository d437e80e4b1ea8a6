//! Neural primitives: 2-D convolution (with dilation), batch normalization,
//! activations, global pooling, row softmax, and the bottleneck residual block.
//!
//! All operate on `[n, c, h, w]` tensors and are differentiable through the
//! tape. Convolution lowers to an im2col gather followed by one matrix
//! product, which keeps a single gradient path through `matmul`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of one 2-D convolution.
#[derive(Clone)]
pub struct Conv2dParams {
    /// `[out_c, in_c, kh, kw]`
    pub weight: Tensor,
    /// `[out_c]`
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        assert_eq!(weight.shape().len(), 4, "conv weight must be 4-D");
        Conv2dParams {
            weight,
            bias,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }

    pub fn with_geometry(
        mut self,
        stride: (usize, usize),
        padding: (usize, usize),
        dilation: (usize, usize),
    ) -> Self {
        self.stride = stride;
        self.padding = padding;
        self.dilation = dilation;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Output extent of a convolution along one axis, or `None` if degenerate.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = (input + 2 * padding) as i64 - (dilation * (kernel - 1) + 1) as i64;
    if span < 0 {
        return None;
    }
    Some(span as usize / stride + 1)
}

/// Cross-correlation with stride, padding, and dilation.
pub fn conv2d(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::contract(format!("conv2d input must be 4-D, got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let ws = p.weight.shape();
    let (out_c, in_c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if c != in_c {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            left: xs.to_vec(),
            right: ws.to_vec(),
        });
    }
    let oh = conv_output_extent(h, kh, p.stride.0, p.padding.0, p.dilation.0)
        .ok_or_else(|| Error::contract(format!("conv2d output height not positive for input {h}")))?;
    let ow = conv_output_extent(w, kw, p.stride.1, p.padding.1, p.dilation.1)
        .ok_or_else(|| Error::contract(format!("conv2d output width not positive for input {w}")))?;

    // im2col gather: rows are output positions, columns are receptive-field taps.
    let ck = c * kh * kw;
    let mut indices = Vec::with_capacity(n * oh * ow * ck);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    for ky in 0..kh {
                        let sy = (oy * p.stride.0 + ky * p.dilation.0) as i64 - p.padding.0 as i64;
                        for kx in 0..kw {
                            let sx =
                                (ox * p.stride.1 + kx * p.dilation.1) as i64 - p.padding.1 as i64;
                            let ok = sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64;
                            indices.push(if ok {
                                ((ni * c + ci) * h + sy as usize) * w + sx as usize
                            } else {
                                usize::MAX
                            });
                        }
                    }
                }
            }
        }
    }
    let cols = x.index_select(indices, &[n * oh * ow, ck]);
    let wmat = p.weight.reshape(&[out_c, ck]).transpose2();
    let out_mat = cols.matmul(&wmat)?; // [n*oh*ow, out_c]

    // Rearrange [n*oh*ow, out_c] into [n, out_c, oh, ow].
    let mut perm = Vec::with_capacity(n * out_c * oh * ow);
    for ni in 0..n {
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    perm.push(((ni * oh + oy) * ow + ox) * out_c + oc);
                }
            }
        }
    }
    let mut out = out_mat.index_select(perm, &[n, out_c, oh, ow]);
    if let Some(bias) = &p.bias {
        out = out.channel_bias(bias);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Learnable affine plus running statistics for batch normalization.
#[derive(Clone)]
pub struct BatchNormState {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    /// Fresh state: scale 1, shift 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            scale: Tensor::filled(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Batch normalization over the channel axis of `[n, c, …]`.
///
/// Train mode normalizes with batch statistics and updates the running
/// estimates (unbiased variance, matching the usual convention); eval mode
/// applies the running statistics. Both modes are differentiable with
/// respect to the input and the affine parameters.
pub fn batch_norm(x: &Tensor, s: &mut BatchNormState) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() < 2 || xs[1] != s.channels() {
        return Err(Error::ShapeMismatch {
            op: "batch_norm channels",
            left: xs.to_vec(),
            right: vec![s.channels()],
        });
    }
    assert!(s.epsilon > 0.0, "batch_norm epsilon must be positive");
    match s.mode {
        BnMode::Train => {
            let per_channel = x.len() / s.channels();
            if per_channel < 2 {
                return Err(Error::contract(format!(
                    "batch_norm train mode needs n*h*w >= 2 per channel, got {per_channel}"
                )));
            }
            let (y, mean, _var_b, var_u) = x.batch_norm_train(&s.scale, &s.shift, s.epsilon);
            for c in 0..s.channels() {
                s.running_mean[c] = (1.0 - s.momentum) * s.running_mean[c] + s.momentum * mean[c];
                s.running_var[c] = (1.0 - s.momentum) * s.running_var[c] + s.momentum * var_u[c];
            }
            Ok(y)
        }
        BnMode::Eval => {
            let c = s.channels();
            let neg_mean: Vec<f64> = s.running_mean.iter().map(|&m| -m).collect();
            let inv_std: Vec<f64> = s
                .running_var
                .iter()
                .map(|&v| 1.0 / (v + s.epsilon).sqrt())
                .collect();
            let centered = x.channel_bias(&Tensor::constant(neg_mean, &[c]));
            let factor = s.scale.mul(&Tensor::constant(inv_std, &[c]));
            Ok(centered.channel_scale(&factor).channel_bias(&s.shift))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

/// Elementwise activation. The leaky slope must lie in `[0, 1)`.
pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Relu => Ok(x.relu()),
        Activation::LeakyRelu(slope) => {
            if !(0.0..1.0).contains(&slope) {
                return Err(Error::contract(format!(
                    "leaky_relu slope must be in [0, 1), got {slope}"
                )));
            }
            Ok(x.leaky_relu(slope))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Collapse the spatial extent of `[n, c, h, w]` to `[n, c]`.
pub fn global_pool(x: &Tensor, kind: PoolKind) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::contract(format!(
            "global_pool input must be 4-D, got {:?}",
            x.shape()
        )));
    }
    Ok(match kind {
        PoolKind::Avg => x.global_avg_pool(),
        PoolKind::Max => x.global_max_pool(),
    })
}

/// Row-wise softmax with max subtraction; rejects NaN input.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if m.shape().len() != 2 {
        return Err(Error::contract(format!(
            "softmax_rows input must be 2-D, got {:?}",
            m.shape()
        )));
    }
    if let Some(i) = m.first_nonfinite() {
        return Err(Error::NonFinite {
            context: "softmax_rows input".into(),
            index: i,
        });
    }
    Ok(m.softmax_rows_prim())
}

/// Residual bottleneck: 1x1 reduce, 3x3, 1x1 expand, each with BN.
#[derive(Clone)]
pub struct BottleneckParams {
    pub conv1: Conv2dParams,
    pub bn1: BatchNormState,
    pub conv2: Conv2dParams,
    pub bn2: BatchNormState,
    pub conv3: Conv2dParams,
    pub bn3: BatchNormState,
    /// 1x1 projection on the identity path when channel counts differ.
    pub projection: Option<(Conv2dParams, BatchNormState)>,
}

/// `relu(x + F(x))` with `F = conv1x1 -> BN -> relu -> conv3x3(pad 1) -> BN -> relu -> conv1x1 -> BN`.
pub fn bottleneck(x: &Tensor, p: &mut BottleneckParams) -> Result<Tensor> {
    let in_c = x.shape()[1];
    let out_c = p.conv3.out_channels();
    if p.projection.is_none() && in_c != out_c {
        return Err(Error::ShapeMismatch {
            op: "bottleneck identity channels",
            left: vec![in_c],
            right: vec![out_c],
        });
    }
    let f = batch_norm(&conv2d(x, &p.conv1)?, &mut p.bn1)?.relu();
    let f = batch_norm(&conv2d(&f, &p.conv2)?, &mut p.bn2)?.relu();
    let f = batch_norm(&conv2d(&f, &p.conv3)?, &mut p.bn3)?;
    let identity = match &mut p.projection {
        Some((conv, bn)) => batch_norm(&conv2d(x, conv)?, bn)?,
        None => x.clone(),
    };
    Ok(identity.add(&f).relu())
}

#[cfg(test)]
mod tests;
