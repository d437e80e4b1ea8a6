//! Wengert tape: records primitive operations during the forward pass and
//! replays them in reverse to accumulate gradients.
//!
//! Nodes are appended after their parents, so the arena index order is a
//! topological order and the backward sweep is a single reverse scan. A tape
//! lives for one forward/backward pass and is dropped afterwards.

use std::cell::RefCell;
use std::rc::Rc;

/// Sentinel source index used by `IndexSelect` for padding cells (reads as 0).
pub(crate) const PAD: usize = usize::MAX;

/// Recorded primitive. Parent fields are node indices into the same tape.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Sum(usize),
    /// out[j] = src[idx[j]], with `PAD` entries reading as zero.
    IndexSelect {
        a: usize,
        idx: Rc<Vec<usize>>,
    },
    /// Concatenation of whole buffers, in order.
    Concat {
        parts: Vec<(usize, usize)>, // (node, element count)
    },
    Relu(usize),
    LeakyRelu(usize, f64),
    SoftmaxRows {
        a: usize,
        rows: usize,
        cols: usize,
    },
    LogSoftmaxRows {
        a: usize,
        rows: usize,
        cols: usize,
    },
    /// y = sqrt(max(x, floor)); derivative is zero on the clamped side.
    SqrtClamp {
        a: usize,
        floor: f64,
    },
    /// y[n,c,s] = x[n,c,s] * scale[c] over an [n, c, spatial] view.
    ChannelScale {
        x: usize,
        scale: usize,
        channels: usize,
        spatial: usize,
    },
    /// y[n,c,s] = x[n,c,s] + bias[c] over an [n, c, spatial] view.
    ChannelBias {
        x: usize,
        bias: usize,
        channels: usize,
        spatial: usize,
    },
    /// Train-mode batch norm over [n, c, spatial]; statistics per channel.
    BatchNormTrain {
        x: usize,
        scale: usize,
        shift: usize,
        channels: usize,
        spatial: usize,
        x_hat: Rc<Vec<f64>>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool {
        x: usize,
        spatial: usize,
    },
    GlobalMaxPool {
        x: usize,
        spatial: usize,
        argmax: Vec<usize>,
    },
    /// out[i,j] = squared Euclidean distance between rows i and j of x [n, d].
    PairwiseSqDist {
        x: usize,
        n: usize,
        d: usize,
    },
}

pub(crate) struct Node {
    pub op: Op,
    pub data: Rc<Vec<f64>>,
    /// True when a gradient must flow to or through this node.
    pub requires: bool,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub nodes: RefCell<Vec<Node>>,
    pub grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a recording tape. Cloning shares the underlying arena.
#[derive(Clone, Default)]
pub struct Tape {
    pub(crate) inner: Rc<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, op: Op, data: Rc<Vec<f64>>, requires: bool) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, data, requires });
        self.inner.grads.borrow_mut().push(None);
        id
    }

    pub(crate) fn node_data(&self, id: usize) -> Rc<Vec<f64>> {
        Rc::clone(&self.inner.nodes.borrow()[id].data)
    }

    pub(crate) fn node_requires(&self, id: usize) -> bool {
        self.inner.nodes.borrow()[id].requires
    }

    pub(crate) fn grad_of(&self, id: usize) -> Option<Vec<f64>> {
        self.inner.grads.borrow()[id].clone()
    }

    /// Reverse sweep seeding `loss_node` with gradient 1.
    ///
    /// Every node is visited at most once, in reverse topological order.
    pub(crate) fn backward_from(&self, loss_node: usize) {
        let nodes = self.inner.nodes.borrow();
        let mut grads = self.inner.grads.borrow_mut();
        grads[loss_node] = Some(vec![1.0]);

        for i in (0..=loss_node).rev() {
            if !nodes[i].requires {
                continue;
            }
            let Some(g) = std::mem::take(&mut grads[i]) else {
                continue;
            };
            accumulate(&nodes, &mut grads, i, &g);
            grads[i] = Some(g);
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], target: usize, mut f: impl FnMut(&mut [f64])) {
    if !nodes[target].requires {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].data.len()]);
    f(slot.as_mut_slice());
}

/// Apply one node's vector-Jacobian product, accumulating into its parents.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let data = |id: usize| -> &[f64] { &nodes[id].data };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            });
            add_into(grads, nodes, *b, |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            });
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            });
            add_into(grads, nodes, *b, |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            let (da, db) = (data(*a), data(*b));
            add_into(grads, nodes, *a, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * db[j];
                }
            });
            add_into(grads, nodes, *b, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * da[j];
                }
            });
        }
        Op::Scale(a, s) => {
            let s = *s;
            add_into(grads, nodes, *a, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * s;
                }
            });
        }
        Op::AddScalar(a) => {
            add_into(grads, nodes, *a, |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            });
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (da, db) = (data(*a), data(*b));
            add_into(grads, nodes, *a, |d| {
                // dA += G * B^T
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = 0.0;
                        let gr = &g[i * n..(i + 1) * n];
                        let br = &db[l * n..(l + 1) * n];
                        for j in 0..n {
                            acc += gr[j] * br[j];
                        }
                        d[i * k + l] += acc;
                    }
                }
            });
            add_into(grads, nodes, *b, |d| {
                // dB += A^T * G
                for l in 0..k {
                    for i in 0..m {
                        let av = da[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        let gr = &g[i * n..(i + 1) * n];
                        let dr = &mut d[l * n..(l + 1) * n];
                        for j in 0..n {
                            dr[j] += av * gr[j];
                        }
                    }
                }
            });
        }
        Op::Transpose { a, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            add_into(grads, nodes, *a, |d| {
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            });
        }
        Op::Reshape(a) => {
            add_into(grads, nodes, *a, |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            });
        }
        Op::Sum(a) => {
            let gv = g[0];
            add_into(grads, nodes, *a, |d| {
                for dv in d.iter_mut() {
                    *dv += gv;
                }
            });
        }
        Op::IndexSelect { a, idx } => {
            add_into(grads, nodes, *a, |d| {
                for (j, &src) in idx.iter().enumerate() {
                    if src != PAD {
                        d[src] += g[j];
                    }
                }
            });
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for &(node, len) in parts {
                let piece = &g[offset..offset + len];
                add_into(grads, nodes, node, |d| {
                    for (dv, gv) in d.iter_mut().zip(piece) {
                        *dv += gv;
                    }
                });
                offset += len;
            }
        }
        Op::Relu(a) => {
            let xa = data(*a);
            add_into(grads, nodes, *a, |d| {
                for j in 0..d.len() {
                    if xa[j] > 0.0 {
                        d[j] += g[j];
                    }
                }
            });
        }
        Op::LeakyRelu(a, slope) => {
            let xa = data(*a);
            let slope = *slope;
            add_into(grads, nodes, *a, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * if xa[j] > 0.0 { 1.0 } else { slope };
                }
            });
        }
        Op::SoftmaxRows { a, rows, cols } => {
            let y = &nodes[i].data;
            let (rows, cols) = (*rows, *cols);
            add_into(grads, nodes, *a, |d| {
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    let dr = &mut d[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows { a, rows, cols } => {
            let y = &nodes[i].data; // log-probabilities
            let (rows, cols) = (*rows, *cols);
            add_into(grads, nodes, *a, |d| {
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    let dr = &mut d[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            });
        }
        Op::SqrtClamp { a, floor } => {
            let xa = data(*a);
            let y = &nodes[i].data;
            let floor = *floor;
            add_into(grads, nodes, *a, |d| {
                for j in 0..d.len() {
                    if xa[j] > floor {
                        d[j] += g[j] * 0.5 / y[j];
                    }
                }
            });
        }
        Op::ChannelScale {
            x,
            scale,
            channels,
            spatial,
        } => {
            let (channels, spatial) = (*channels, *spatial);
            let (xd, sd) = (data(*x), data(*scale));
            add_into(grads, nodes, *x, |d| {
                for j in 0..d.len() {
                    let c = (j / spatial) % channels;
                    d[j] += g[j] * sd[c];
                }
            });
            add_into(grads, nodes, *scale, |d| {
                for j in 0..xd.len() {
                    let c = (j / spatial) % channels;
                    d[c] += g[j] * xd[j];
                }
            });
        }
        Op::ChannelBias {
            x,
            bias,
            channels,
            spatial,
        } => {
            let (channels, spatial) = (*channels, *spatial);
            let total = data(*x).len();
            add_into(grads, nodes, *x, |d| {
                for j in 0..d.len() {
                    d[j] += g[j];
                }
            });
            add_into(grads, nodes, *bias, |d| {
                for j in 0..total {
                    let c = (j / spatial) % channels;
                    d[c] += g[j];
                }
            });
        }
        Op::BatchNormTrain {
            x,
            scale,
            shift,
            channels,
            spatial,
            x_hat,
            inv_std,
        } => {
            let (channels, spatial) = (*channels, *spatial);
            let total = x_hat.len();
            let batch = total / (channels * spatial);
            let m = (batch * spatial) as f64;
            let sd = data(*scale);

            // Per-channel reductions of g and g*x_hat.
            let mut sum_g = vec![0.0; channels];
            let mut sum_gx = vec![0.0; channels];
            for j in 0..total {
                let c = (j / spatial) % channels;
                sum_g[c] += g[j];
                sum_gx[c] += g[j] * x_hat[j];
            }
            add_into(grads, nodes, *shift, |d| {
                for c in 0..channels {
                    d[c] += sum_g[c];
                }
            });
            add_into(grads, nodes, *scale, |d| {
                for c in 0..channels {
                    d[c] += sum_gx[c];
                }
            });
            add_into(grads, nodes, *x, |d| {
                for j in 0..total {
                    let c = (j / spatial) % channels;
                    let coeff = sd[c] * inv_std[c] / m;
                    d[j] += coeff * (m * g[j] - sum_g[c] - x_hat[j] * sum_gx[c]);
                }
            });
        }
        Op::GlobalAvgPool { x, spatial } => {
            let spatial = *spatial;
            let inv = 1.0 / spatial as f64;
            add_into(grads, nodes, *x, |d| {
                for (row, gv) in g.iter().enumerate() {
                    let base = row * spatial;
                    for s in 0..spatial {
                        d[base + s] += gv * inv;
                    }
                }
            });
        }
        Op::GlobalMaxPool { x, argmax, .. } => {
            add_into(grads, nodes, *x, |d| {
                for (row, gv) in g.iter().enumerate() {
                    d[argmax[row]] += gv;
                }
            });
        }
        Op::PairwiseSqDist { x, n, d: dim } => {
            let (n, dim) = (*n, *dim);
            let xd = data(*x);
            add_into(grads, nodes, *x, |d| {
                for a in 0..n {
                    for b in 0..n {
                        let w = g[a * n + b] + g[b * n + a];
                        if w == 0.0 {
                            continue;
                        }
                        for t in 0..dim {
                            d[a * dim + t] += 2.0 * w * (xd[a * dim + t] - xd[b * dim + t]);
                        }
                    }
                }
            });
        }
    }
}
