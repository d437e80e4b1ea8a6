//! Dense row-major tensor with reverse-mode automatic differentiation.
//!
//! Values are `f64` throughout: the finite-difference checks in this crate
//! need the headroom, and double precision keeps every pipeline bit-for-bit
//! reproducible across runs. Tensors are immutable after construction; a
//! tensor either lives on a [`Tape`] (participates in gradients) or is a free
//! constant. Mixing the two in one operation silently registers the constant
//! on the tape as a non-differentiable leaf.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::Tape;

use crate::error::{Error, Result};
use std::rc::Rc;
use tape::{Op, PAD};

#[derive(Clone)]
pub struct Tensor {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    tracked: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.tracked.as_ref().map(|(_, id)| *id))
            .field("data", &self.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    /// Register a differentiable leaf (a parameter or input) on this tape.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        self.leaf_with(data, shape, true)
    }

    fn leaf_with(&self, data: Vec<f64>, shape: &[usize], requires: bool) -> Tensor {
        assert_eq!(
            data.len(),
            numel(shape),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let rc = Rc::new(data);
        let id = self.push(Op::Leaf, Rc::clone(&rc), requires);
        Tensor {
            data: rc,
            shape: shape.to_vec(),
            tracked: Some((self.clone(), id)),
        }
    }
}

impl Tensor {
    /// A tensor outside any tape; gradients never flow into it.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            data: Rc::new(data),
            shape: shape.to_vec(),
            tracked: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![0.0; numel(shape)], shape)
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor::constant(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::constant(vec![value], &[1])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// True when every element is finite (no NaN, no Inf).
    pub fn finite(&self) -> bool {
        self.first_nonfinite().is_none()
    }

    /// Flat index of the first NaN/Inf element, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn requires_grad(&self) -> bool {
        match &self.tracked {
            Some((tape, id)) => tape.node_requires(*id),
            None => false,
        }
    }

    /// Gradient accumulated for this tensor by the last `backward` call.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let (tape, id) = self.tracked.as_ref()?;
        tape.grad_of(*id)
    }

    /// Reverse sweep from a scalar loss. Every `requires_grad` tensor that
    /// influenced the loss ends up with its gradient retrievable via `grad()`.
    pub fn backward(&self) -> Result<()> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let Some((tape, id)) = &self.tracked else {
            return Err(Error::contract(
                "backward on a constant tensor: loss is not connected to a tape",
            ));
        };
        tape.backward_from(*id);
        Ok(())
    }

    // ---- recording machinery ----------------------------------------------

    fn tape_of<'a>(operands: &[&'a Tensor]) -> Option<&'a Tape> {
        let mut found: Option<&Tape> = None;
        for t in operands {
            if let Some((tape, _)) = &t.tracked {
                match found {
                    None => found = Some(tape),
                    Some(prev) => assert!(
                        prev.same_tape(tape),
                        "operands recorded on different tapes"
                    ),
                }
            }
        }
        found
    }

    fn node_on(&self, tape: &Tape) -> (usize, bool) {
        match &self.tracked {
            Some((_, id)) => (*id, tape.node_requires(*id)),
            // Constants join the tape as frozen leaves.
            None => (tape.push(Op::Leaf, Rc::clone(&self.data), false), false),
        }
    }

    fn record(
        operands: &[&Tensor],
        data: Vec<f64>,
        shape: Vec<usize>,
        make_op: impl FnOnce(&[usize]) -> Op,
    ) -> Tensor {
        match Tensor::tape_of(operands) {
            None => Tensor {
                data: Rc::new(data),
                shape,
                tracked: None,
            },
            Some(tape) => {
                let tape = tape.clone();
                let mut ids = Vec::with_capacity(operands.len());
                let mut requires = false;
                for t in operands {
                    let (id, req) = t.node_on(&tape);
                    ids.push(id);
                    requires |= req;
                }
                let rc = Rc::new(data);
                let id = tape.push(make_op(&ids), Rc::clone(&rc), requires);
                Tensor {
                    data: rc,
                    shape,
                    tracked: Some((tape, id)),
                }
            }
        }
    }

    // ---- elementwise -------------------------------------------------------

    fn zip_with(&self, other: &Tensor, name: &str, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        assert_eq!(
            self.shape, other.shape,
            "{name}: shape {:?} vs {:?}",
            self.shape, other.shape
        );
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let data = self.zip_with(other, "add", |a, b| a + b);
        Tensor::record(&[self, other], data, self.shape.clone(), |ids| {
            Op::Add(ids[0], ids[1])
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let data = self.zip_with(other, "sub", |a, b| a - b);
        Tensor::record(&[self, other], data, self.shape.clone(), |ids| {
            Op::Sub(ids[0], ids[1])
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let data = self.zip_with(other, "mul", |a, b| a * b);
        Tensor::record(&[self, other], data, self.shape.clone(), |ids| {
            Op::Mul(ids[0], ids[1])
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|&v| v * s).collect();
        Tensor::record(&[self], data, self.shape.clone(), |ids| Op::Scale(ids[0], s))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|&v| v + s).collect();
        Tensor::record(&[self], data, self.shape.clone(), |ids| Op::AddScalar(ids[0]))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product of two 2-D tensors; gradient flows to both operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let ok = self.shape.len() == 2 && other.shape.len() == 2 && self.shape[1] == other.shape[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let data = matmul_raw(&self.data, &other.data, m, k, n);
        Ok(Tensor::record(&[self, other], data, vec![m, n], |ids| {
            Op::MatMul {
                a: ids[0],
                b: ids[1],
                m,
                k,
                n,
            }
        }))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose2 on shape {:?}", self.shape);
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = self.data[r * cols + c];
            }
        }
        Tensor::record(&[self], data, vec![cols, rows], |ids| Op::Transpose {
            a: ids[0],
            rows,
            cols,
        })
    }

    /// Same data, new shape. The element count must not change.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.data.len(),
            "reshape {:?} -> {:?}",
            self.shape,
            shape
        );
        Tensor::record(&[self], self.to_vec(), shape.to_vec(), |ids| Op::Reshape(ids[0]))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data.iter().sum();
        Tensor::record(&[self], vec![total], vec![1], |ids| Op::Sum(ids[0]))
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.data.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Gather `out[j] = self[indices[j]]` into `shape`; `usize::MAX` reads 0.
    pub(crate) fn index_select(&self, indices: Vec<usize>, shape: &[usize]) -> Tensor {
        assert_eq!(indices.len(), numel(shape));
        let data: Vec<f64> = indices
            .iter()
            .map(|&ix| if ix == PAD { 0.0 } else { self.data[ix] })
            .collect();
        let idx = Rc::new(indices);
        Tensor::record(&[self], data, shape.to_vec(), |ids| Op::IndexSelect {
            a: ids[0],
            idx,
        })
    }

    /// Concatenate flattened tensors in order into `shape`.
    pub(crate) fn concat(parts: &[&Tensor], shape: &[usize]) -> Tensor {
        let total: usize = parts.iter().map(|t| t.len()).sum();
        assert_eq!(total, numel(shape), "concat length vs shape {shape:?}");
        let mut data = Vec::with_capacity(total);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let lens: Vec<usize> = parts.iter().map(|t| t.len()).collect();
        Tensor::record(parts, data, shape.to_vec(), |ids| Op::Concat {
            parts: ids.iter().copied().zip(lens).collect(),
        })
    }

    // ---- nonlinearities ----------------------------------------------------

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v.max(0.0)).collect();
        Tensor::record(&[self], data, self.shape.clone(), |ids| Op::Relu(ids[0]))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        Tensor::record(&[self], data, self.shape.clone(), |ids| {
            Op::LeakyRelu(ids[0], slope)
        })
    }

    /// Row-wise softmax of a 2-D tensor with per-row max subtraction.
    pub(crate) fn softmax_rows_prim(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "softmax_rows on shape {:?}", self.shape);
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &self.data[r * cols..(r + 1) * cols];
            let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dr = &mut data[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for j in 0..cols {
                let e = (xr[j] - m).exp();
                dr[j] = e;
                z += e;
            }
            for v in dr.iter_mut() {
                *v /= z;
            }
        }
        Tensor::record(&[self], data, self.shape.clone(), |ids| Op::SoftmaxRows {
            a: ids[0],
            rows,
            cols,
        })
    }

    /// Row-wise log-softmax (stable) of a 2-D tensor.
    pub(crate) fn log_softmax_rows(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &self.data[r * cols..(r + 1) * cols];
            let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = xr.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
            for j in 0..cols {
                data[r * cols + j] = xr[j] - lse;
            }
        }
        Tensor::record(&[self], data, self.shape.clone(), |ids| Op::LogSoftmaxRows {
            a: ids[0],
            rows,
            cols,
        })
    }

    /// `sqrt(max(x, floor))` elementwise; gradient is zero on the clamped side.
    pub(crate) fn sqrt_clamp(&self, floor: f64) -> Tensor {
        let data = self.data.iter().map(|&v| v.max(floor).sqrt()).collect();
        Tensor::record(&[self], data, self.shape.clone(), |ids| Op::SqrtClamp {
            a: ids[0],
            floor,
        })
    }

    // ---- channel-indexed ops (layout [n, c, spatial…]) ----------------------

    fn channel_view(&self, what: &str) -> (usize, usize) {
        assert!(
            self.shape.len() >= 2,
            "{what} needs at least [n, c] layout, got {:?}",
            self.shape
        );
        let channels = self.shape[1];
        let spatial = self.shape[2..].iter().product::<usize>().max(1);
        (channels, spatial)
    }

    /// Multiply channel `c` of an `[n, c, …]` tensor by `scale[c]`.
    pub(crate) fn channel_scale(&self, scale: &Tensor) -> Tensor {
        let (channels, spatial) = self.channel_view("channel_scale");
        assert_eq!(scale.len(), channels, "channel_scale vector length");
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(j, &v)| v * scale.data[(j / spatial) % channels])
            .collect();
        Tensor::record(&[self, scale], data, self.shape.clone(), |ids| {
            Op::ChannelScale {
                x: ids[0],
                scale: ids[1],
                channels,
                spatial,
            }
        })
    }

    /// Add `bias[c]` to channel `c` of an `[n, c, …]` tensor.
    pub(crate) fn channel_bias(&self, bias: &Tensor) -> Tensor {
        let (channels, spatial) = self.channel_view("channel_bias");
        assert_eq!(bias.len(), channels, "channel_bias vector length");
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(j, &v)| v + bias.data[(j / spatial) % channels])
            .collect();
        Tensor::record(&[self, bias], data, self.shape.clone(), |ids| {
            Op::ChannelBias {
                x: ids[0],
                bias: ids[1],
                channels,
                spatial,
            }
        })
    }

    /// Train-mode batch normalization over `[n, c, …]` using batch statistics.
    /// Returns the output plus the per-channel batch mean and variances
    /// (biased for normalization, unbiased for running-stat updates).
    pub(crate) fn batch_norm_train(
        &self,
        scale: &Tensor,
        shift: &Tensor,
        epsilon: f64,
    ) -> (Tensor, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (channels, spatial) = self.channel_view("batch_norm_train");
        assert_eq!(scale.len(), channels);
        assert_eq!(shift.len(), channels);
        let total = self.data.len();
        let batch = total / (channels * spatial);
        let m = (batch * spatial) as f64;
        assert!(m >= 2.0, "batch_norm_train needs at least 2 samples per channel");

        let mut mean = vec![0.0; channels];
        for (j, &v) in self.data.iter().enumerate() {
            mean[(j / spatial) % channels] += v;
        }
        for mu in mean.iter_mut() {
            *mu /= m;
        }
        let mut var = vec![0.0; channels];
        for (j, &v) in self.data.iter().enumerate() {
            let c = (j / spatial) % channels;
            let d = v - mean[c];
            var[c] += d * d;
        }
        let var_biased: Vec<f64> = var.iter().map(|&s| s / m).collect();
        let var_unbiased: Vec<f64> = var.iter().map(|&s| s / (m - 1.0)).collect();
        let inv_std: Vec<f64> = var_biased.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();

        let mut x_hat = vec![0.0; total];
        let mut out = vec![0.0; total];
        for (j, &v) in self.data.iter().enumerate() {
            let c = (j / spatial) % channels;
            let h = (v - mean[c]) * inv_std[c];
            x_hat[j] = h;
            out[j] = scale.data[c] * h + shift.data[c];
        }
        let x_hat = Rc::new(x_hat);
        let t = Tensor::record(&[self, scale, shift], out, self.shape.clone(), |ids| {
            Op::BatchNormTrain {
                x: ids[0],
                scale: ids[1],
                shift: ids[2],
                channels,
                spatial,
                x_hat,
                inv_std,
            }
        });
        (t, mean, var_biased, var_unbiased)
    }

    // ---- pooling ------------------------------------------------------------

    /// Mean over the spatial extent of an `[n, c, h, w]` tensor, giving `[n, c]`.
    pub(crate) fn global_avg_pool(&self) -> Tensor {
        let (channels, spatial) = self.channel_view("global_avg_pool");
        let n = self.shape[0];
        let rows = n * channels;
        let mut data = vec![0.0; rows];
        for row in 0..rows {
            let base = row * spatial;
            data[row] = self.data[base..base + spatial].iter().sum::<f64>() / spatial as f64;
        }
        Tensor::record(&[self], data, vec![n, channels], |ids| Op::GlobalAvgPool {
            x: ids[0],
            spatial,
        })
    }

    /// Max over the spatial extent; gradient routes to the first argmax.
    pub(crate) fn global_max_pool(&self) -> Tensor {
        let (channels, spatial) = self.channel_view("global_max_pool");
        let n = self.shape[0];
        let rows = n * channels;
        let mut data = vec![0.0; rows];
        let mut argmax = vec![0usize; rows];
        for row in 0..rows {
            let base = row * spatial;
            let mut best = f64::NEG_INFINITY;
            let mut at = base;
            for s in 0..spatial {
                let v = self.data[base + s];
                if v > best {
                    best = v;
                    at = base + s;
                }
            }
            data[row] = best;
            argmax[row] = at;
        }
        Tensor::record(&[self], data, vec![n, channels], |ids| Op::GlobalMaxPool {
            x: ids[0],
            spatial,
            argmax,
        })
    }

    /// Squared Euclidean distances between all row pairs of an `[n, d]` tensor.
    pub(crate) fn pairwise_sqdist(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "pairwise_sqdist on shape {:?}", self.shape);
        let (n, d) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let mut acc = 0.0;
                for t in 0..d {
                    let diff = self.data[i * d + t] - self.data[j * d + t];
                    acc += diff * diff;
                }
                data[i * n + j] = acc;
                data[j * n + i] = acc;
            }
        }
        Tensor::record(&[self], data, vec![n, n], |ids| Op::PairwiseSqDist {
            x: ids[0],
            n,
            d,
        })
    }
}

/// Plain triple-loop product kept in `ikj` order so the inner loop streams.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let or = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let br = &b[l * n..(l + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}
