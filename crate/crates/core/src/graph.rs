//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one node per operation in evaluation order. Values
//! are computed eagerly when a node is pushed, so node inputs always precede
//! the node itself. [`Graph::gradient`] walks the tape backwards from a
//! scalar output and returns the gradient of every named parameter leaf.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::{
    matmul_a_bt_into, matmul_at_b_into, matmul_into, sigmoid, silu, silu_grad, softplus, zoh,
    zoh_phi_grad, Tensor,
};

pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dimensions of a selective scan: batch, time, channels, state width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub steps: usize,
    pub channels: usize,
    pub state: usize,
}

/// Per-step quantities of a selective scan, each laid out `[B, T, D, N]`.
#[derive(Clone, Debug)]
pub struct ScanCache {
    pub hidden: Vec<f64>,
    pub abar: Vec<f64>,
    pub phi: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Silu(NodeId),
    Softplus(NodeId),
    SliceLast { src: NodeId, start: usize },
    Reshape(NodeId),
    SwapLast2(NodeId),
    Concat0(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    CausalConv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Scan {
        u: NodeId,
        delta: NodeId,
        a: NodeId,
        bm: NodeId,
        cm: NodeId,
        d: NodeId,
        dims: ScanDims,
        cache: ScanCache,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        xhat: Vec<f64>,
        inv_sd: Vec<f64>,
    },
    PairCosine {
        x: NodeId,
        y: NodeId,
        pairs: Vec<(usize, usize)>,
        x_norms: Vec<f64>,
        y_norms: Vec<f64>,
    },
    SegmentLse {
        src: NodeId,
        segments: Vec<Vec<usize>>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | Concat0(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Exp(a) | Log(a) | Abs(a) | Silu(a) | Softplus(a) | Reshape(a)
            | SwapLast2(a) | Sum(a) | Mean(a) => vec![*a],
            SliceLast { src, .. } | SegmentLse { src, .. } => vec![*src],
            CausalConv { x, w, b } => vec![*x, *w, *b],
            Scan {
                u,
                delta,
                a,
                bm,
                cm,
                d,
                ..
            } => vec![*u, *delta, *a, *bm, *cm, *d],
            LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            PairCosine { x, y, .. } => vec![*x, *y],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

const LN_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Named parameter leaves in registration order.
    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    /// Registers a named, differentiable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Graph(format!("duplicate parameter `{name}`")));
        }
        let id = self.push(Op::Leaf, value);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// Registers every entry of a named map as a parameter leaf.
    pub fn params_from(&mut self, named: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, NodeId>> {
        named
            .iter()
            .map(|(k, v)| Ok((k.clone(), self.param(k, v.clone())?)))
            .collect()
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn get(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Graph(format!("unknown node {}", id.0)))
    }

    /// Matrix product of `a [.., k]` (leading axes flattened) with `b [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.get(a)?, self.get(b)?);
        if av.rank() < 2 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let k = av.last_dim();
        let m = av.len() / k;
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.get(a)?, self.get(b)?);
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Adds a `[d]` vector to every row of `a [.., d]`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.get(a)?, self.get(bias)?);
        if bv.rank() != 1 || av.last_dim() != bv.len() {
            return Err(mismatch("add_row", av, bv));
        }
        let d = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % d])
            .collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(a, bias), v))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = self.get(a)?.map(f);
        Ok(self.push(op, v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Silu(a), silu)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sv = self.get(src)?;
        let d = sv.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of last axis {d}",
                start + len
            )));
        }
        let rows = sv.len() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&sv.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = sv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(Op::SliceLast { src, start }, v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.get(a)?.reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// `[B, M, N] -> [B, N, M]`.
    pub fn swap_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.get(a)?;
        if av.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: av.shape().to_vec(),
                reason: "swap_last2 needs rank 3".into(),
            });
        }
        let (b, m, n) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let v = Tensor::new(vec![b, n, m], swap_last2(av.data(), b, m, n))?;
        Ok(self.push(Op::SwapLast2(a), v))
    }

    /// Concatenation along the first axis.
    pub fn concat0(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.get(a)?, self.get(b)?);
        if av.rank() == 0 || av.rank() != bv.rank() || av.shape()[1..] != bv.shape()[1..] {
            return Err(mismatch("concat0", av, bv));
        }
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let v = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat0(a, b), v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.get(a)?.sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.get(a)?;
        let s = av.sum() / av.len() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(s)))
    }

    /// Depthwise causal convolution of `x [B, T, C]` with kernel `w [C, K]`
    /// and bias `b [C]`; the input is left-padded with `K-1` zeros.
    pub fn causal_conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.get(x)?, self.get(w)?, self.get(b)?);
        if xv.rank() != 3 || wv.rank() != 2 || wv.shape()[0] != xv.shape()[2] {
            return Err(mismatch("causal_conv", xv, wv));
        }
        if bv.shape() != [xv.shape()[2]] {
            return Err(mismatch("causal_conv", xv, bv));
        }
        let (nb, nt, nc) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k = wv.shape()[1];
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; xv.len()];
        for bi in 0..nb {
            for t in 0..nt {
                let o = &mut out[(bi * nt + t) * nc..(bi * nt + t + 1) * nc];
                o.copy_from_slice(bd);
                for tap in 0..k {
                    let Some(src_t) = (t + tap + 1).checked_sub(k) else {
                        continue;
                    };
                    let xrow = &xd[(bi * nt + src_t) * nc..(bi * nt + src_t + 1) * nc];
                    for c in 0..nc {
                        o[c] += wd[c * k + tap] * xrow[c];
                    }
                }
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(Op::CausalConv { x, w, b }, v))
    }

    /// Fused zero-order-hold discretization and selective scan.
    ///
    /// Shapes: `u, delta [B,T,D]`, `a [D,N]` (continuous, negative), `bm, cm [B,T,N]`,
    /// `d [D]`. Returns `y [B,T,D]` with `y_t = C_t·h_t + d⊙u_t`.
    pub fn selective_scan(
        &mut self,
        u: NodeId,
        delta: NodeId,
        a: NodeId,
        bm: NodeId,
        cm: NodeId,
        d: NodeId,
    ) -> Result<NodeId> {
        let uv = self.get(u)?;
        if uv.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: uv.shape().to_vec(),
                reason: "scan input must be [B, T, D]".into(),
            });
        }
        let (nb, nt, nd) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
        let av = self.get(a)?;
        if av.rank() != 2 || av.shape()[0] != nd {
            return Err(mismatch("selective_scan", uv, av));
        }
        let ns = av.shape()[1];
        let dims = ScanDims {
            batch: nb,
            steps: nt,
            channels: nd,
            state: ns,
        };
        for (id, want) in [
            (delta, vec![nb, nt, nd]),
            (bm, vec![nb, nt, ns]),
            (cm, vec![nb, nt, ns]),
            (d, vec![nd]),
        ] {
            let v = self.get(id)?;
            if v.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "selective_scan",
                    lhs: v.shape().to_vec(),
                    rhs: want,
                });
            }
        }
        if self.get(delta)?.data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument("scan step sizes must be positive".into()));
        }
        let (y, cache) = scan_forward(
            uv.data(),
            self.get(delta)?.data(),
            av.data(),
            self.get(bm)?.data(),
            self.get(cm)?.data(),
            self.get(d)?.data(),
            dims,
        );
        let v = Tensor::new(vec![nb, nt, nd], y)?;
        Ok(self.push(
            Op::Scan {
                u,
                delta,
                a,
                bm,
                cm,
                d,
                dims,
                cache,
            },
            v,
        ))
    }

    /// Per-step cache of a scan node, if `id` is one.
    pub fn scan_cache(&self, id: NodeId) -> Option<(&ScanCache, ScanDims)> {
        match &self.nodes.get(id.0)?.op {
            Op::Scan { cache, dims, .. } => Some((cache, *dims)),
            _ => None,
        }
    }

    /// Layer normalization over the last axis with elementwise gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId) -> Result<NodeId> {
        let (xv, gv, sv) = (self.get(x)?, self.get(gain)?, self.get(shift)?);
        let d = xv.last_dim();
        if gv.shape() != [d] || sv.shape() != [d] {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_sd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_sd[r] = is;
            for c in 0..d {
                let xh = (row[c] - mu) * is;
                xhat[r * d + c] = xh;
                out[r * d + c] = gv.data()[c] * xh + sv.data()[c];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_sd,
            },
            v,
        ))
    }

    /// Cosine similarity of row pairs `(i, j)` between `x [.., D]` and `y [.., D]`.
    pub fn pair_cosine(&mut self, x: NodeId, y: NodeId, pairs: Vec<(usize, usize)>) -> Result<NodeId> {
        let (xv, yv) = (self.get(x)?, self.get(y)?);
        if xv.last_dim() != yv.last_dim() {
            return Err(mismatch("pair_cosine", xv, yv));
        }
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("pair_cosine needs at least one pair".into()));
        }
        let d = xv.last_dim();
        let norms = |t: &Tensor| -> Vec<f64> {
            t.data()
                .chunks(d)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let (x_norms, y_norms) = (norms(xv), norms(yv));
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            if i >= x_norms.len() || j >= y_norms.len() {
                return Err(Error::InvalidArgument(format!("pair ({i}, {j}) out of range")));
            }
            let (nx, ny) = (x_norms[i], y_norms[j]);
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::ZeroNorm("pair_cosine"));
            }
            out.push(dot(xv.row(i), yv.row(j)) / (nx * ny));
        }
        let v = Tensor::from_vec(out);
        Ok(self.push(
            Op::PairCosine {
                x,
                y,
                pairs,
                x_norms,
                y_norms,
            },
            v,
        ))
    }

    /// `out[s] = ln Σ_{k ∈ segments[s]} exp(src[k])`, computed stably.
    pub fn segment_logsumexp(&mut self, src: NodeId, segments: Vec<Vec<usize>>) -> Result<NodeId> {
        let sv = self.get(src)?;
        if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("empty segment".into()));
        }
        let mut out = Vec::with_capacity(segments.len());
        for seg in &segments {
            if seg.iter().any(|&k| k >= sv.len()) {
                return Err(Error::InvalidArgument("segment index out of range".into()));
            }
            out.push(logsumexp(seg.iter().map(|&k| sv.data()[k])));
        }
        let v = Tensor::from_vec(out);
        Ok(self.push(Op::SegmentLse { src, segments }, v))
    }

    /// Reverse-mode gradients of the scalar `output` for every named parameter.
    ///
    /// Parameters that do not influence `output` get zero tensors.
    pub fn gradient(&self, output: NodeId) -> Result<Gradients> {
        let out = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::Graph(format!("unknown output node {}", output.0)))?;
        if out.value.len() != 1 {
            return Err(Error::Graph(format!(
                "gradient needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if node.op.inputs().iter().any(|i| i.0 >= idx) {
                return Err(Error::Graph(format!("cycle at node {idx}")));
            }
            if let Some(g) = grads[idx].take() {
                self.backprop(idx, &g, &mut grads);
            }
        }
        let mut result = Gradients::new();
        let mut seen = HashSet::new();
        for (name, id) in &self.params {
            seen.insert(*id);
            let shape = self.nodes[id.0].value.shape().to_vec();
            let g = match grads.get_mut(id.0).and_then(Option::take) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            result.insert(name.clone(), g);
        }
        Ok(result)
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let nodes = &self.nodes;
        macro_rules! acc {
            ($id:expr) => {{
                let id: NodeId = $id;
                let n = nodes[id.0].value.len();
                grads[id.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = av.last_dim();
                let m = av.len() / k;
                let n = bv.shape()[1];
                matmul_a_bt_into(g, bv.data(), acc!(*a), m, k, n);
                matmul_at_b_into(av.data(), g, acc!(*b), m, k, n);
            }
            Op::Add(a, b) => {
                axpy(acc!(*a), g, 1.0);
                axpy(acc!(*b), g, 1.0);
            }
            Op::Sub(a, b) => {
                axpy(acc!(*a), g, 1.0);
                axpy(acc!(*b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                for (o, (gi, bi)) in acc!(*a).iter_mut().zip(g.iter().zip(bv)) {
                    *o += gi * bi;
                }
                for (o, (gi, ai)) in acc!(*b).iter_mut().zip(g.iter().zip(av)) {
                    *o += gi * ai;
                }
            }
            Op::AddRow(a, bias) => {
                axpy(acc!(*a), g, 1.0);
                let gb = acc!(*bias);
                let d = gb.len();
                for (i, gi) in g.iter().enumerate() {
                    gb[i % d] += gi;
                }
            }
            Op::Scale(a, c) => axpy(acc!(*a), g, *c),
            Op::Exp(a) => {
                let y = node.value.data();
                for (o, (gi, yi)) in acc!(*a).iter_mut().zip(g.iter().zip(y)) {
                    *o += gi * yi;
                }
            }
            Op::Log(a) => {
                let x = val(*a).data();
                for (o, (gi, xi)) in acc!(*a).iter_mut().zip(g.iter().zip(x)) {
                    *o += gi / xi;
                }
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                for (o, (gi, xi)) in acc!(*a).iter_mut().zip(g.iter().zip(x)) {
                    // subgradient 0 at the kink
                    *o += if *xi > 0.0 {
                        *gi
                    } else if *xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    };
                }
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                for (o, (gi, xi)) in acc!(*a).iter_mut().zip(g.iter().zip(x)) {
                    *o += gi * silu_grad(*xi);
                }
            }
            Op::Softplus(a) => {
                let x = val(*a).data();
                for (o, (gi, xi)) in acc!(*a).iter_mut().zip(g.iter().zip(x)) {
                    *o += gi * sigmoid(*xi);
                }
            }
            Op::SliceLast { src, start } => {
                let d = val(*src).last_dim();
                let len = node.value.last_dim();
                let gs = acc!(*src);
                for (r, grow) in g.chunks(len).enumerate() {
                    axpy(&mut gs[r * d + start..r * d + start + len], grow, 1.0);
                }
            }
            Op::Reshape(a) => axpy(acc!(*a), g, 1.0),
            Op::SwapLast2(a) => {
                let s = node.value.shape();
                let back = swap_last2(g, s[0], s[1], s[2]);
                axpy(acc!(*a), &back, 1.0);
            }
            Op::Concat0(a, b) => {
                let na = val(*a).len();
                axpy(acc!(*a), &g[..na], 1.0);
                axpy(acc!(*b), &g[na..], 1.0);
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc!(*a).iter_mut().for_each(|o| *o += g0);
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                let g0 = g[0] / n;
                acc!(*a).iter_mut().for_each(|o| *o += g0);
            }
            Op::CausalConv { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (nb, nt, nc) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let k = wv.shape()[1];
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; nc];
                for bi in 0..nb {
                    for t in 0..nt {
                        let grow = &g[(bi * nt + t) * nc..(bi * nt + t + 1) * nc];
                        axpy(&mut gb, grow, 1.0);
                        for tap in 0..k {
                            let Some(src_t) = (t + tap + 1).checked_sub(k) else {
                                continue;
                            };
                            let off = (bi * nt + src_t) * nc;
                            for c in 0..nc {
                                gx[off + c] += grow[c] * wv.data()[c * k + tap];
                                gw[c * k + tap] += grow[c] * xv.data()[off + c];
                            }
                        }
                    }
                }
                axpy(acc!(*x), &gx, 1.0);
                axpy(acc!(*w), &gw, 1.0);
                axpy(acc!(*b), &gb, 1.0);
            }
            Op::Scan {
                u,
                delta,
                a,
                bm,
                cm,
                d,
                dims,
                cache,
            } => {
                let sg = scan_backward(
                    g,
                    val(*u).data(),
                    val(*delta).data(),
                    val(*a).data(),
                    val(*bm).data(),
                    val(*cm).data(),
                    val(*d).data(),
                    *dims,
                    cache,
                );
                axpy(acc!(*u), &sg.u, 1.0);
                axpy(acc!(*delta), &sg.delta, 1.0);
                axpy(acc!(*a), &sg.a, 1.0);
                axpy(acc!(*bm), &sg.b, 1.0);
                axpy(acc!(*cm), &sg.c, 1.0);
                axpy(acc!(*d), &sg.d, 1.0);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_sd,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gs = vec![0.0; d];
                for (r, &is) in inv_sd.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..d {
                        let gxh = grow[c] * gv[c];
                        m1 += gxh;
                        m2 += gxh * xh[c];
                        gg[c] += grow[c] * xh[c];
                        gs[c] += grow[c];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for c in 0..d {
                        gx[r * d + c] = is * (grow[c] * gv[c] - m1 - xh[c] * m2);
                    }
                }
                axpy(acc!(*x), &gx, 1.0);
                axpy(acc!(*gain), &gg, 1.0);
                axpy(acc!(*shift), &gs, 1.0);
            }
            Op::PairCosine {
                x,
                y,
                pairs,
                x_norms,
                y_norms,
            } => {
                let (xv, yv) = (val(*x), val(*y));
                let dd = xv.last_dim();
                let mut gx = vec![0.0; xv.len()];
                let mut gy = vec![0.0; yv.len()];
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let s = node.value.data()[p];
                    let (nx, ny) = (x_norms[i], y_norms[j]);
                    let (xr, yr) = (xv.row(i), yv.row(j));
                    let inv = g[p] / (nx * ny);
                    let cx = g[p] * s / (nx * nx);
                    let cy = g[p] * s / (ny * ny);
                    for c in 0..dd {
                        gx[i * dd + c] += inv * yr[c] - cx * xr[c];
                        gy[j * dd + c] += inv * xr[c] - cy * yr[c];
                    }
                }
                axpy(acc!(*x), &gx, 1.0);
                axpy(acc!(*y), &gy, 1.0);
            }
            Op::SegmentLse { src, segments } => {
                let sv = val(*src).data();
                let mut gs = vec![0.0; sv.len()];
                for (s, seg) in segments.iter().enumerate() {
                    let lse = node.value.data()[s];
                    for &k in seg {
                        gs[k] += g[s] * (sv[k] - lse).exp();
                    }
                }
                axpy(acc!(*src), &gs, 1.0);
            }
        }
    }
}

fn axpy(out: &mut [f64], x: &[f64], c: f64) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += c * v;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn swap_last2(src: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        let base = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    out
}

/// Forward selective scan with zero-order-hold discretization; `h_0 = 0`.
pub(crate) fn scan_forward(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    d: &[f64],
    dims: ScanDims,
) -> (Vec<f64>, ScanCache) {
    let ScanDims {
        batch,
        steps,
        channels,
        state,
    } = dims;
    let total = batch * steps * channels * state;
    let mut hidden = vec![0.0; total];
    let mut abar = vec![0.0; total];
    let mut phi = vec![0.0; total];
    let mut y = vec![0.0; batch * steps * channels];
    let plane = channels * state;
    let mut carry = vec![0.0; plane];
    for b in 0..batch {
        carry.fill(0.0);
        for t in 0..steps {
            let bt = b * steps + t;
            let brow = &bm[bt * state..(bt + 1) * state];
            let crow = &cm[bt * state..(bt + 1) * state];
            for i in 0..channels {
                let x = u[bt * channels + i];
                let dt = delta[bt * channels + i];
                let base = bt * plane + i * state;
                let arow = &a[i * state..(i + 1) * state];
                let h_state = &mut carry[i * state..(i + 1) * state];
                let h_out = &mut hidden[base..base + state];
                let ab_out = &mut abar[base..base + state];
                let ph_out = &mut phi[base..base + state];
                let mut acc = 0.0;
                for j in 0..state {
                    let (ab, ph) = zoh(dt, arow[j]);
                    let h = ab * h_state[j] + ph * brow[j] * x;
                    h_state[j] = h;
                    h_out[j] = h;
                    ab_out[j] = ab;
                    ph_out[j] = ph;
                    acc += crow[j] * h;
                }
                y[bt * channels + i] = acc + d[i] * x;
            }
        }
    }
    (y, ScanCache { hidden, abar, phi })
}

struct ScanGrads {
    u: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn scan_backward(
    gy: &[f64],
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    d: &[f64],
    dims: ScanDims,
    cache: &ScanCache,
) -> ScanGrads {
    let ScanDims {
        batch,
        steps,
        channels,
        state,
    } = dims;
    let plane = channels * state;
    let mut out = ScanGrads {
        u: vec![0.0; u.len()],
        delta: vec![0.0; delta.len()],
        a: vec![0.0; a.len()],
        b: vec![0.0; bm.len()],
        c: vec![0.0; cm.len()],
        d: vec![0.0; d.len()],
    };
    let mut carry = vec![0.0; plane];
    for b in 0..batch {
        carry.iter_mut().for_each(|c| *c = 0.0);
        for t in (0..steps).rev() {
            let bt = b * steps + t;
            for i in 0..channels {
                let g = gy[bt * channels + i];
                let x = u[bt * channels + i];
                let dt = delta[bt * channels + i];
                let base = bt * plane + i * state;
                let mut gu = g * d[i];
                let mut gdt = 0.0;
                out.d[i] += g * x;
                let arow = &a[i * state..(i + 1) * state];
                let brow = &bm[bt * state..(bt + 1) * state];
                let crow = &cm[bt * state..(bt + 1) * state];
                let hrow = &cache.hidden[base..base + state];
                let prev_row = if t > 0 { Some(&cache.hidden[base - plane..base - plane + state]) } else { None };
                let ab_row = &cache.abar[base..base + state];
                let ph_row = &cache.phi[base..base + state];
                let carry_row = &mut carry[i * state..(i + 1) * state];
                let ga_row = &mut out.a[i * state..(i + 1) * state];
                let gb_row = &mut out.b[bt * state..(bt + 1) * state];
                let gc_row = &mut out.c[bt * state..(bt + 1) * state];
                for j in 0..state {
                    let aij = arow[j];
                    let bj = brow[j];
                    let gh = g * crow[j] + carry_row[j];
                    gc_row[j] += g * hrow[j];
                    let prev = prev_row.map_or(0.0, |p| p[j]);
                    let ab = ab_row[j];
                    let ph = ph_row[j];
                    let g_ab = gh * prev;
                    let g_bbar = gh * x;
                    gu += gh * ph * bj;
                    gb_row[j] += g_bbar * ph;
                    let g_ph = g_bbar * bj;
                    let (pd, pa) = zoh_phi_grad(dt, aij, ab);
                    gdt += g_ab * ab * aij + g_ph * pd;
                    ga_row[j] += g_ab * ab * dt + g_ph * pa;
                    carry_row[j] = gh * ab;
                }
                out.u[bt * channels + i] += gu;
                out.delta[bt * channels + i] += gdt;
            }
        }
    }
    out
}
