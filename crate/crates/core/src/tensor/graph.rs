use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, softmax_row};
use super::{Element, ParamId, ParamStore, Tensor, TensorError, MASK_VALUE};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: F,
    },
    AddScalar {
        a: Var,
    },
    SumAll {
        a: Var,
    },
    MeanAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        a: Var,
    },
    Log {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Relu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
        outer: usize,
    },
    MaskedFill {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        smoothing: F,
        rows_per_group: usize,
        counts: Vec<usize>,
        probs: Vec<F>,
    },
    ClampMin {
        a: Var,
        floor: F,
    },
    Reshape {
        a: Var,
    },
    SwapAxes12 {
        a: Var,
        dims: [usize; 4],
    },
    SelectCol {
        a: Var,
        col: usize,
        cols: usize,
    },
    ScaleRows {
        a: Var,
        w: Var,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode tape.
///
/// Nodes are appended in creation order, which is already a topological
/// order; backward is a single reverse sweep. A graph supports exactly one
/// backward pass.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    track_params: bool,
    training: bool,
    seed: u64,
    step: u64,
    backward_done: bool,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the dropout stream for one op at one training step.
pub(crate) fn dropout_stream_seed(seed: u64, op_id: u64, step: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ op_id) ^ step.rotate_left(17))
}

/// Interprets `b` as a suffix of `a` and returns how often it repeats.
fn suffix_repeats(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize, TensorError> {
    let fits = b.len() <= a.len() && a[a.len() - b.len()..] == *b;
    if !fits {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(a[..a.len() - b.len()].iter().product())
}

impl<F: Element> Graph<F> {
    /// Evaluation graph: dropout disabled, parameters tracked for gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            track_params: true,
            training: false,
            seed: 0,
            step: 0,
            backward_done: false,
        }
    }

    /// Enables dropout, with its randomness derived from `(seed, op id, step)`.
    pub fn with_dropout(mut self, seed: u64, step: u64) -> Self {
        self.training = true;
        self.seed = seed;
        self.step = step;
        self
    }

    /// Parameters enter as constants; nothing is recorded for backward.
    pub fn without_param_grads(mut self) -> Self {
        self.track_params = false;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`. Nodes that
    /// require gradients but did not influence the loss report zeros.
    pub fn grad(&self, v: Var) -> Option<Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !self.backward_done {
            return None;
        }
        Some(
            self.grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![F::zero(); node.value.numel()]),
        )
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so a
    /// parameter used by several paths accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<Var, TensorError> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let track = self.track_params;
        let v = self.push(store.value(id).clone(), Op::Leaf, track, "param")?;
        self.params.insert(id, v);
        self.param_order.push((id, v));
        Ok(v)
    }

    /// Adds this graph's parameter gradients into the store's accumulators.
    pub fn write_param_grads(&self, store: &mut ParamStore<F>) {
        for &(id, v) in &self.param_order {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate_grad(id, g);
            }
        }
    }

    // ---- forward ops -------------------------------------------------

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either a shared
    /// `[k, n]` matrix or has the same leading batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Graph::matmul`] with the last two axes of `b` transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..batch {
                let ab = &ad[i * m * k..(i + 1) * m * k];
                let bb = if shared_b { bd } else { &bd[i * k * n..(i + 1) * k * n] };
                let cb = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(ab, bb, cb, m, k, n);
                } else {
                    gemm_nn(ab, bb, cb, m, k, n);
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            },
            rg,
            "matmul",
        )
    }

    /// Elementwise sum; `b` may be a trailing-suffix shape repeated over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        suffix_repeats("add", self.shape(a), self.shape(b))?;
        let bd = self.data(b);
        let nb = bd.len();
        let out: Vec<F> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg, "add")
    }

    /// Elementwise product with the same suffix rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        suffix_repeats("mul", self.shape(a), self.shape(b))?;
        let bd = self.data(b);
        let nb = bd.len();
        let out: Vec<F> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let s = F::of(s);
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Scale { a, s }, rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let c = F::of(c);
        let out = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::AddScalar { a }, rg, "add_scalar")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: F = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg, "sum")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "mean_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = F::of(1.0 / len as f64);
        let ad = self.data(a);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &ad[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= inv);
        let mut new_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(new_shape, out)?,
            Op::MeanAxis { a, outer, len, inner },
            rg,
            "mean_axis",
        )
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.value(a).check_finite("softmax")?;
        let cols = self.value(a).cols();
        let ad = self.data(a);
        let mut out = vec![F::zero(); ad.len()];
        for (x, y) in ad.chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(x, y);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Softmax { a }, rg, "softmax")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.data(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Log { a }, rg, "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.data(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Exp { a }, rg, "exp")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.data(a).iter().map(|&x| x.max(F::zero())).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Relu { a }, rg, "relu")
    }

    /// Layer norm over the last axis with learned `gain` and `bias` (eps 1e-5).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = F::of(1e-5);
        let inv_d = F::of(1.0 / d as f64);
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let rows = xd.len() / d;
        let mut xhat = vec![F::zero(); xd.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Row lookup: `ids` of shape `id_shape` into a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var, TensorError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || id_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table {ts:?} with ids of shape {id_shape:?}"),
            });
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("token id {bad} outside vocabulary of {v}"),
            });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self
            .shape(*inputs.first().ok_or(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total / inner;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
                outer,
            },
            rg,
            "concat",
        )
    }

    /// Adds [`MASK_VALUE`] wherever `mask` is true. `mask` covers every element.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var, TensorError> {
        if mask.len() != self.value(a).numel() {
            return Err(TensorError::Invalid {
                op: "masked_fill",
                msg: format!("mask of {} for tensor {:?}", mask.len(), self.shape(a)),
            });
        }
        let fill = F::of(MASK_VALUE);
        let out = self
            .data(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { x + fill } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::MaskedFill { a }, rg, "masked_fill")
    }

    /// Inverted dropout. Identity outside training or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var, TensorError> {
        if !self.training || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability {p} must be below 1"),
            });
        }
        let op_id = self.nodes.len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_stream_seed(self.seed, op_id, self.step));
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Dropout { a, mask }, rg, "dropout")
    }

    /// Label-smoothed cross-entropy averaged over non-pad positions.
    /// Returns a scalar `[1]`.
    pub fn cross_entropy_ls(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad_id: usize,
    ) -> Result<Var, TensorError> {
        self.cross_entropy_ls_grouped(logits, targets, smoothing, pad_id, 1)
    }

    /// Label-smoothed cross-entropy with rows split into `groups` equal
    /// consecutive groups (one per instance); each output entry is the mean
    /// over that group's non-pad positions. Output shape `[groups]`.
    pub fn cross_entropy_ls_grouped(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad_id: usize,
        groups: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "cross_entropy_ls";
        self.value(logits).check_finite(OP)?;
        let vocab = self.value(logits).cols();
        let rows = self.value(logits).numel() / vocab;
        if targets.len() != rows || groups == 0 || !rows.is_multiple_of(groups) {
            return Err(TensorError::Invalid {
                op: OP,
                msg: format!("{} targets for {rows} rows in {groups} groups", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != pad_id && t >= vocab) {
            return Err(TensorError::Invalid {
                op: OP,
                msg: format!("target {bad} outside vocabulary of {vocab}"),
            });
        }
        let rows_per_group = rows / groups;
        let eps = smoothing;
        let ld = self.data(logits);
        let mut probs = vec![F::zero(); ld.len()];
        let mut totals = vec![0.0f64; groups];
        let mut counts = vec![0usize; groups];
        for r in 0..rows {
            let t = targets[r];
            if t == pad_id {
                continue;
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            softmax_row(row, &mut probs[r * vocab..(r + 1) * vocab]);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|&v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            let nll_t = lse - row[t].as_f64();
            let nll_mean = lse - row.iter().map(|&v| v.as_f64()).sum::<f64>() / vocab as f64;
            let g = r / rows_per_group;
            totals[g] += (1.0 - eps) * nll_t + eps * nll_mean;
            counts[g] += 1;
        }
        if counts.contains(&0) {
            return Err(TensorError::EmptyTarget { op: OP });
        }
        let out: Vec<F> = totals.iter().zip(&counts).map(|(&t, &c)| F::of(t / c as f64)).collect();
        let rg = self.rg(logits);
        self.push(
            Tensor::new(vec![groups], out)?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                smoothing: F::of(smoothing),
                rows_per_group,
                counts,
                probs,
            },
            rg,
            OP,
        )
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, TensorError> {
        let floor = F::of(floor);
        let out = self.data(a).iter().map(|&x| x.max(floor)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::ClampMin { a, floor }, rg, "clamp_min")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape { a }, rg, "reshape")
    }

    /// `[a, b, c, e] -> [a, c, b, e]`; used to split and merge attention heads.
    pub fn swap_axes_12(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "swap_axes_12",
                msg: format!("expected rank 4, got {s:?}"),
            });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.data(a), dims);
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?,
            Op::SwapAxes12 { a, dims },
            rg,
            "swap_axes_12",
        )
    }

    /// Column `col` of a `[R, C]` matrix as a `[R]` vector.
    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || col >= s[1] {
            return Err(TensorError::Invalid {
                op: "select_col",
                msg: format!("column {col} of {s:?}"),
            });
        }
        let cols = s[1];
        let out = self.data(a).chunks(cols).map(|r| r[col]).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![s[0]], out)?, Op::SelectCol { a, col, cols }, rg, "select_col")
    }

    /// Multiplies every slice `a[r, ..]` by `w[r]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 1 || sa[0] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: sa,
                rhs: sw,
            });
        }
        let per = self.value(a).numel() / sa[0];
        let wd = self.data(w);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * wd[i / per])
            .collect();
        let rg = self.rg(a) || self.rg(w);
        self.push(Tensor::new(sa, out)?, Op::ScaleRows { a, w }, rg, "scale_rows")
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of every node that requires them with respect
    /// to the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.shape().to_vec()));
        }
        ls.check_finite("backward")?;
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[F]) {
        // Ops borrow node data while writing into other nodes' grad slots;
        // the grad storage is a separate vector, so split the borrows.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                let b_block = |j: usize| if shared_b { 0..k * n } else { j * k * n..(j + 1) * k * n };
                acc(a, &mut |da| {
                    for j in 0..batch {
                        let gb = &g[j * m * n..(j + 1) * m * n];
                        let bb = &bd[b_block(j)];
                        let dab = &mut da[j * m * k..(j + 1) * m * k];
                        if trans_b {
                            gemm_nn(gb, bb, dab, m, n, k);
                        } else {
                            gemm_nt(gb, bb, dab, m, n, k);
                        }
                    }
                });
                acc(b, &mut |db| {
                    for j in 0..batch {
                        let gb = &g[j * m * n..(j + 1) * m * n];
                        let ab = &ad[j * m * k..(j + 1) * m * k];
                        let dbb = &mut db[b_block(j)];
                        if trans_b {
                            gemm_tn(gb, ab, dbb, n, m, k);
                        } else {
                            gemm_tn(ab, gb, dbb, k, m, n);
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |da| {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                });
                acc(b, &mut |db| {
                    let nb = db.len();
                    for (j, &x) in g.iter().enumerate() {
                        db[j % nb] += x;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                let nb = bd.len();
                acc(a, &mut |da| {
                    for (j, (d, &x)) in da.iter_mut().zip(g).enumerate() {
                        *d += x * bd[j % nb];
                    }
                });
                acc(b, &mut |db| {
                    for (j, &x) in g.iter().enumerate() {
                        db[j % nb] += x * ad[j];
                    }
                });
            }
            &Op::Scale { a, s } => acc(a, &mut |da| {
                for (d, &x) in da.iter_mut().zip(g) {
                    *d += x * s;
                }
            }),
            &Op::AddScalar { a } | &Op::MaskedFill { a } | &Op::Reshape { a } => acc(a, &mut |da| {
                for (d, &x) in da.iter_mut().zip(g) {
                    *d += x;
                }
            }),
            &Op::SumAll { a } => acc(a, &mut |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
            &Op::MeanAxis { a, outer, len, inner } => {
                let inv = F::of(1.0 / len as f64);
                acc(a, &mut |da| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &x) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += x * inv;
                            }
                        }
                    }
                });
            }
            &Op::Softmax { a } => {
                let y = out.data();
                let cols = out.cols();
                acc(a, &mut |da| {
                    for ((dr, yr), gr) in da.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += p * (q - dot);
                        }
                    }
                });
            }
            &Op::Log { a } => {
                let x = nodes[a.0].value.data();
                acc(a, &mut |da| {
                    for ((d, &q), &v) in da.iter_mut().zip(g).zip(x) {
                        *d += q / v;
                    }
                });
            }
            &Op::Exp { a } => {
                let y = out.data();
                acc(a, &mut |da| {
                    for ((d, &q), &v) in da.iter_mut().zip(g).zip(y) {
                        *d += q * v;
                    }
                });
            }
            &Op::Relu { a } => {
                let x = nodes[a.0].value.data();
                acc(a, &mut |da| {
                    for ((d, &q), &v) in da.iter_mut().zip(g).zip(x) {
                        if v > F::zero() {
                            *d += q;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gd = nodes[gain.0].value.data();
                let inv_d = F::of(1.0 / d as f64);
                acc(*x, &mut |dx| {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            dx[r * d + j] += inv * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Concat {
                inputs,
                widths,
                outer,
                ..
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    acc(v, &mut |dv| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            for (d, &x) in dv[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Dropout { a, mask } => acc(*a, &mut |da| {
                for ((d, &q), &m) in da.iter_mut().zip(g).zip(mask) {
                    *d += q * m;
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                smoothing,
                rows_per_group,
                counts,
                probs,
            } => {
                let vocab = nodes[logits.0].value.cols();
                let uniform = *smoothing / F::of(vocab as f64);
                let on_target = F::one() - *smoothing;
                acc(*logits, &mut |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        let grp = r / rows_per_group;
                        let scale = g[grp] / F::of(counts[grp] as f64);
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        let dr = &mut dl[r * vocab..(r + 1) * vocab];
                        for (j, (d, &p)) in dr.iter_mut().zip(pr).enumerate() {
                            let q = if j == t { on_target + uniform } else { uniform };
                            *d += scale * (p - q);
                        }
                    }
                });
            }
            &Op::ClampMin { a, floor } => {
                let x = nodes[a.0].value.data();
                acc(a, &mut |da| {
                    for ((d, &q), &v) in da.iter_mut().zip(g).zip(x) {
                        if v > floor {
                            *d += q;
                        }
                    }
                });
            }
            &Op::SwapAxes12 { a, dims } => {
                let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                acc(a, &mut |da| {
                    for (d, &x) in da.iter_mut().zip(&back) {
                        *d += x;
                    }
                });
            }
            &Op::SelectCol { a, col, cols } => acc(a, &mut |da| {
                for (r, &q) in g.iter().enumerate() {
                    da[r * cols + col] += q;
                }
            }),
            &Op::ScaleRows { a, w } => {
                let ad = nodes[a.0].value.data();
                let wd = nodes[w.0].value.data();
                let per = ad.len() / wd.len();
                acc(a, &mut |da| {
                    for (j, (d, &q)) in da.iter_mut().zip(g).enumerate() {
                        *d += q * wd[j / per];
                    }
                });
                acc(w, &mut |dw| {
                    for (j, &q) in g.iter().enumerate() {
                        dw[j / per] += q * ad[j];
                    }
                });
            }
        }
    }
}

fn swap12<F: Element>(x: &[F], [a, b, c, e]: [usize; 4]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * e;
                let dst = ((i * c + k) * b + j) * e;
                out[dst..dst + e].copy_from_slice(&x[src..src + e]);
            }
        }
    }
    out
}
