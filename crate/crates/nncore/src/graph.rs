//! The per-step tape: nodes, forward operators, reverse sweep.

use crate::conv::{
    conv2d_backward, conv2d_forward, convt2d_backward, convt2d_forward, ConvGeom,
};
use crate::scalar::Scalar;
use crate::NnError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

const BCE_EPS: f64 = 1e-7;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Relu {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        k: T,
    },
    AddConst {
        x: VarId,
    },
    SumAll {
        x: VarId,
    },
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: VarId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<T>,
        var: Vec<T>,
        eval: bool,
    },
    ConcatCh {
        parts: Vec<VarId>,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
    },
    L1Mean {
        a: VarId,
        b: VarId,
    },
    CosineSim {
        a: VarId,
        b: VarId,
    },
    Bce {
        pred: VarId,
        target: VarId,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    tracked: bool,
    op: Op<T>,
}

/// A single-use computation tape. Nodes only reference earlier nodes, so
/// creation order is a topological order and the reverse sweep is a plain
/// reverse iteration.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, tracked: bool, op: Op<T>) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            tracked,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Insert a leaf. Tracked leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, data: &[T], shape: &[usize], tracked: bool) -> VarId {
        self.push(shape.to_vec(), data.to_vec(), tracked, Op::Leaf)
    }

    /// Leaf from f64 values (test and oracle convenience).
    pub fn leaf_f64(&mut self, data: &[f64], shape: &[usize], tracked: bool) -> VarId {
        let cast: Vec<T> = data.iter().map(|v| T::from_f64(*v)).collect();
        self.push(shape.to_vec(), cast, tracked, Op::Leaf)
    }

    /// Detached copy: same values, no gradient path into its source.
    pub fn detach(&mut self, x: VarId) -> VarId {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: VarId) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn is_tracked(&self, v: VarId) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last backward pass, if this node is tracked.
    pub fn grad(&self, v: VarId) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, v: VarId) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn tracked_any(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn expect_same_shape(&self, a: VarId, b: VarId, what: &str) -> Result<(), NnError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(NnError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn expect_4d(&self, v: VarId, what: &str) -> Result<[usize; 4], NnError> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 4 {
            return Err(NnError::ShapeMismatch(format!(
                "{what} expects 4-d (n,c,h,w), got {s:?}"
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    // -- elementwise -------------------------------------------------------

    pub fn relu(&mut self, x: VarId) -> VarId {
        let data = self.nodes[x.0].data.iter().map(|v| v.max(T::zero())).collect();
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.nodes[x.0].tracked;
        self.push(shape, data, tracked, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| T::one() / (T::one() + (-*v).exp()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.nodes[x.0].tracked;
        self.push(shape, data, tracked, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NnError> {
        self.expect_same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, data, tracked, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NnError> {
        self.expect_same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, data, tracked, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let k = T::from_f64(k);
        let data = self.nodes[x.0].data.iter().map(|v| *v * k).collect();
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.nodes[x.0].tracked;
        self.push(shape, data, tracked, Op::Scale { x, k })
    }

    pub fn add_const(&mut self, x: VarId, k: f64) -> VarId {
        let k = T::from_f64(k);
        let data = self.nodes[x.0].data.iter().map(|v| *v + k).collect();
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.nodes[x.0].tracked;
        self.push(shape, data, tracked, Op::AddConst { x })
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let mut s = T::zero();
        for v in &self.nodes[x.0].data {
            s = s + *v;
        }
        let tracked = self.nodes[x.0].tracked;
        self.push(vec![1], vec![s], tracked, Op::SumAll { x })
    }

    // -- structured --------------------------------------------------------

    /// 2-d convolution; weight is `[co, ci, kh, kw]`, default geometry for
    /// this codebase is 3x3, stride 1, pad 1.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, NnError> {
        let [n, ci, h, width] = self.expect_4d(x, "conv2d input")?;
        let [co, wci, kh, kw] = self.expect_4d(w, "conv2d weight")?;
        if wci != ci {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d: input has {ci} channels, weight expects {wci}"
            )));
        }
        if h + 2 * pad < kh || width + 2 * pad < kw {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{width}"
            )));
        }
        if let Some(bias) = b {
            if self.nodes[bias.0].shape != [co] {
                return Err(NnError::ShapeMismatch(format!(
                    "conv2d bias shape {:?}, expected [{co}]",
                    self.nodes[bias.0].shape
                )));
            }
        }
        let g = ConvGeom {
            c: ci,
            h,
            w: width,
            kh,
            kw,
            stride,
            pad,
        };
        let out = conv2d_forward(
            &self.nodes[x.0].data,
            n,
            &self.nodes[w.0].data,
            co,
            b.map(|bias| self.nodes[bias.0].data.as_slice()),
            &g,
        );
        let shape = vec![n, co, g.out_h(), g.out_w()];
        let mut ids = vec![x, w];
        if let Some(bias) = b {
            ids.push(bias);
        }
        let tracked = self.tracked_any(&ids);
        Ok(self.push(shape, out, tracked, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed convolution (exact adjoint of [`Graph::conv2d`] with the
    /// same kernel buffer); weight is `[ci, co, kh, kw]`. Stride 2 with a
    /// 2x2 kernel doubles the spatial dims.
    pub fn conv_transpose2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, NnError> {
        let [n, a, h, width] = self.expect_4d(x, "conv_transpose2d input")?;
        let [wa, co, kh, kw] = self.expect_4d(w, "conv_transpose2d weight")?;
        if wa != a {
            return Err(NnError::ShapeMismatch(format!(
                "conv_transpose2d: input has {a} channels, weight expects {wa}"
            )));
        }
        let out_h = (h - 1) * stride + kh - 2 * pad;
        let out_w = (width - 1) * stride + kw - 2 * pad;
        if let Some(bias) = b {
            if self.nodes[bias.0].shape != [co] {
                return Err(NnError::ShapeMismatch(format!(
                    "conv_transpose2d bias shape {:?}, expected [{co}]",
                    self.nodes[bias.0].shape
                )));
            }
        }
        let g = ConvGeom {
            c: co,
            h: out_h,
            w: out_w,
            kh,
            kw,
            stride,
            pad,
        };
        debug_assert_eq!(g.out_h(), h);
        let out = convt2d_forward(
            &self.nodes[x.0].data,
            n,
            a,
            &self.nodes[w.0].data,
            co,
            b.map(|bias| self.nodes[bias.0].data.as_slice()),
            &g,
        );
        let shape = vec![n, co, out_h, out_w];
        let mut ids = vec![x, w];
        if let Some(bias) = b {
            ids.push(bias);
        }
        let tracked = self.tracked_any(&ids);
        Ok(self.push(shape, out, tracked, Op::ConvT2d { x, w, b, stride, pad }))
    }

    /// 2x2 max pooling, stride 2; spatial dims must be even.
    pub fn maxpool2x2(&mut self, x: VarId) -> Result<VarId, NnError> {
        let [n, c, h, w] = self.expect_4d(x, "maxpool2x2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "maxpool2x2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for img in 0..n * c {
            let base = img * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_at = base + (oy * 2) * w + ox * 2;
                    let mut best = src[best_at];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let at = base + (oy * 2 + dy) * w + ox * 2 + dx;
                        if src[at] > best {
                            best = src[at];
                            best_at = at;
                        }
                    }
                    let o = img * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_at as u32;
                }
            }
        }
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(vec![n, c, oh, ow], out, tracked, Op::MaxPool2 { x, argmax }))
    }

    /// Batch normalization over (n, h, w) per channel.
    ///
    /// `running`: `None` is train mode (batch statistics, exposed through
    /// [`Graph::batch_stats`] so the caller can update its running buffers);
    /// `Some((mean, var))` is eval mode using those frozen statistics.
    pub fn batchnorm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running: Option<(&[T], &[T])>,
    ) -> Result<VarId, NnError> {
        let [n, c, h, w] = self.expect_4d(x, "batchnorm input")?;
        for (param, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.nodes[param.0].shape != [c] {
                return Err(NnError::ShapeMismatch(format!(
                    "batchnorm {name} shape {:?}, expected [{c}]",
                    self.nodes[param.0].shape
                )));
            }
        }
        let count = n * h * w;
        let src = &self.nodes[x.0].data;
        let (mean, var, eval) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(NnError::ShapeMismatch(format!(
                        "running stats have {} / {} entries, expected {c}",
                        m.len(),
                        v.len()
                    )));
                }
                (m.to_vec(), v.to_vec(), true)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for img in 0..n {
                        let base = (img * c + ch) * h * w;
                        for v in &src[base..base + h * w] {
                            s = s + *v;
                        }
                    }
                    let m = s / T::from_f64(count as f64);
                    let mut sq = T::zero();
                    for img in 0..n {
                        let base = (img * c + ch) * h * w;
                        for v in &src[base..base + h * w] {
                            let d = *v - m;
                            sq = sq + d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::from_f64(count as f64);
                }
                (mean, var, false)
            }
        };
        let eps = T::from_f64(BN_EPS);
        let gamma_v = &self.nodes[gamma.0].data;
        let beta_v = &self.nodes[beta.0].data;
        let mut out = vec![T::zero(); src.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let inv = T::one() / (var[ch] + eps).sqrt();
                for k in 0..h * w {
                    out[base + k] = gamma_v[ch] * (src[base + k] - mean[ch]) * inv + beta_v[ch];
                }
            }
        }
        let tracked = self.tracked_any(&[x, gamma, beta]);
        Ok(self.push(
            vec![n, c, h, w],
            out,
            tracked,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eval,
            },
        ))
    }

    /// Batch statistics computed by a train-mode batchnorm node, as f64.
    pub fn batch_stats(&self, v: VarId) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, eval: false, .. } => Some((
                mean.iter().map(|x| x.to_double()).collect(),
                var.iter().map(|x| x.to_double()).collect(),
            )),
            _ => None,
        }
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[VarId]) -> Result<VarId, NnError> {
        if parts.is_empty() {
            return Err(NnError::ConcatMismatch("no inputs".into()));
        }
        let [n, _, h, w] = self.expect_4d(parts[0], "concat input")?;
        let mut c_total = 0;
        for p in parts {
            let [pn, pc, ph, pw] = self.expect_4d(*p, "concat input")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(NnError::ConcatMismatch(format!(
                    "batch/spatial dims differ: {:?} vs {:?}",
                    self.nodes[parts[0].0].shape, self.nodes[p.0].shape
                )));
            }
            c_total += pc;
        }
        let mut out = vec![T::zero(); n * c_total * h * w];
        for img in 0..n {
            let mut ch_off = 0;
            for p in parts {
                let pc = self.nodes[p.0].shape[1];
                let src = &self.nodes[p.0].data[img * pc * h * w..(img + 1) * pc * h * w];
                let dst_base = (img * c_total + ch_off) * h * w;
                out[dst_base..dst_base + pc * h * w].copy_from_slice(src);
                ch_off += pc;
            }
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(
            vec![n, c_total, h, w],
            out,
            tracked,
            Op::ConcatCh {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Fully connected layer: `x[n, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId, NnError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NnError::ShapeMismatch(format!(
                "linear: x {xs:?} incompatible with w {ws:?}"
            )));
        }
        let (n, input) = (xs[0], xs[1]);
        let out_dim = ws[0];
        // x (n x in) * w^T (in x out)
        let mut wt = vec![T::zero(); input * out_dim];
        for r in 0..out_dim {
            for c in 0..input {
                wt[c * out_dim + r] = self.nodes[w.0].data[r * input + c];
            }
        }
        let mut out = vec![T::zero(); n * out_dim];
        T::gemm(
            n,
            input,
            out_dim,
            T::one(),
            &self.nodes[x.0].data,
            &wt,
            T::zero(),
            &mut out,
        );
        if let Some(bias) = b {
            if self.nodes[bias.0].shape != [out_dim] {
                return Err(NnError::ShapeMismatch(format!(
                    "linear bias shape {:?}, expected [{out_dim}]",
                    self.nodes[bias.0].shape
                )));
            }
            for row in out.chunks_exact_mut(out_dim) {
                for (v, bc) in row.iter_mut().zip(&self.nodes[bias.0].data) {
                    *v = *v + *bc;
                }
            }
        }
        let mut ids = vec![x, w];
        if let Some(bias) = b {
            ids.push(bias);
        }
        let tracked = self.tracked_any(&ids);
        Ok(self.push(vec![n, out_dim], out, tracked, Op::Linear { x, w, b }))
    }

    // -- reductions / losses -----------------------------------------------

    /// Mean absolute difference over all elements; scalar output.
    pub fn l1_mean(&mut self, a: VarId, b: VarId) -> Result<VarId, NnError> {
        self.expect_same_shape(a, b, "l1_mean")?;
        let n = self.nodes[a.0].data.len();
        let mut s = T::zero();
        for (x, y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            s = s + (*x - *y).abs();
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(
            vec![1],
            vec![s / T::from_f64(n as f64)],
            tracked,
            Op::L1Mean { a, b },
        ))
    }

    /// Cosine similarity of the flattened tensors; scalar in [-1, 1].
    pub fn cosine_sim(&mut self, a: VarId, b: VarId) -> Result<VarId, NnError> {
        self.expect_same_shape(a, b, "cosine_sim")?;
        let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
        for (x, y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            dot = dot + *x * *y;
            na = na + *x * *x;
            nb = nb + *y * *y;
        }
        let tiny = T::from_f64(1e-24);
        if na < tiny || nb < tiny {
            return Err(NnError::ZeroNorm);
        }
        let c = dot / (na.sqrt() * nb.sqrt());
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(vec![1], vec![c], tracked, Op::CosineSim { a, b }))
    }

    /// Mean binary cross entropy of predictions in (0,1) against targets.
    pub fn bce(&mut self, pred: VarId, target: VarId) -> Result<VarId, NnError> {
        self.expect_same_shape(pred, target, "bce")?;
        let eps = T::from_f64(BCE_EPS);
        let one = T::one();
        let n = self.nodes[pred.0].data.len();
        let mut s = T::zero();
        for (p, t) in self.nodes[pred.0].data.iter().zip(&self.nodes[target.0].data) {
            let p = p.max(eps).min(one - eps);
            s = s - (*t * p.ln() + (one - *t) * (one - p).ln());
        }
        let tracked = self.tracked_any(&[pred, target]);
        Ok(self.push(
            vec![1],
            vec![s / T::from_f64(n as f64)],
            tracked,
            Op::Bce { pred, target },
        ))
    }

    /// Convenience: scalar BCE against a constant 0/1 label.
    pub fn bce_const(&mut self, pred: VarId, label: f64) -> Result<VarId, NnError> {
        let shape = self.nodes[pred.0].shape.clone();
        let n: usize = shape.iter().product();
        let target = self.leaf_f64(&vec![label; n], &shape, false);
        self.bce(pred, target)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss, accumulating gradients into every
    /// tracked node (leaves included). The graph stays usable for reading.
    pub fn backward(&mut self, loss: VarId) -> Result<(), NnError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(NnError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].tracked {
            return Err(NnError::Untracked);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked || self.nodes[i].grad.is_none() {
                continue;
            }
            self.node_backward(i)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: VarId, delta: &[T]) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let len = self.nodes[v.0].data.len();
        let grad = self.nodes[v.0].grad.get_or_insert_with(|| vec![T::zero(); len]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn node_backward(&mut self, i: usize) -> Result<(), NnError> {
        let op = self.nodes[i].op.clone();
        let gout = self.nodes[i].grad.clone().expect("checked by caller");
        match op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let delta: Vec<T> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(&gout)
                    .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                self.accumulate(x, &delta);
            }
            Op::Sigmoid { x } => {
                let delta: Vec<T> = self.nodes[i]
                    .data
                    .iter()
                    .zip(&gout)
                    .map(|(y, g)| *g * *y * (T::one() - *y))
                    .collect();
                self.accumulate(x, &delta);
            }
            Op::Add { a, b } => {
                self.accumulate(a, &gout);
                self.accumulate(b, &gout);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, &gout);
                let neg: Vec<T> = gout.iter().map(|g| -*g).collect();
                self.accumulate(b, &neg);
            }
            Op::Scale { x, k } => {
                let delta: Vec<T> = gout.iter().map(|g| *g * k).collect();
                self.accumulate(x, &delta);
            }
            Op::AddConst { x } => {
                self.accumulate(x, &gout);
            }
            Op::SumAll { x } => {
                let delta = vec![gout[0]; self.nodes[x.0].data.len()];
                self.accumulate(x, &delta);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let [n, ci, h, width] = self.expect_4d(x, "conv2d input")?;
                let co = self.nodes[w.0].shape[0];
                let (kh, kw) = (self.nodes[w.0].shape[2], self.nodes[w.0].shape[3]);
                let g = ConvGeom {
                    c: ci,
                    h,
                    w: width,
                    kh,
                    kw,
                    stride,
                    pad,
                };
                let (dx, dw, db) = conv2d_backward(
                    &self.nodes[x.0].data,
                    n,
                    &self.nodes[w.0].data,
                    co,
                    &gout,
                    &g,
                );
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                if let Some(bias) = b {
                    self.accumulate(bias, &db);
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let [n, a, _, _] = self.expect_4d(x, "conv_transpose2d input")?;
                let co = self.nodes[w.0].shape[1];
                let (kh, kw) = (self.nodes[w.0].shape[2], self.nodes[w.0].shape[3]);
                let out_shape = self.nodes[i].shape.clone();
                let g = ConvGeom {
                    c: co,
                    h: out_shape[2],
                    w: out_shape[3],
                    kh,
                    kw,
                    stride,
                    pad,
                };
                let (dx, dw, db) = convt2d_backward(
                    &self.nodes[x.0].data,
                    n,
                    a,
                    &self.nodes[w.0].data,
                    &gout,
                    &g,
                );
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                if let Some(bias) = b {
                    self.accumulate(bias, &db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut delta = vec![T::zero(); self.nodes[x.0].data.len()];
                for (o, src) in argmax.iter().enumerate() {
                    delta[*src as usize] = delta[*src as usize] + gout[o];
                }
                self.accumulate(x, &delta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eval,
            } => {
                let [n, c, h, w] = self.expect_4d(x, "batchnorm input")?;
                let count = n * h * w;
                let eps = T::from_f64(BN_EPS);
                let src = &self.nodes[x.0].data;
                let gamma_v = &self.nodes[gamma.0].data;
                let mut dx = vec![T::zero(); src.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let inv = T::one() / (var[ch] + eps).sqrt();
                    // Channel-wise reductions of dy and dy*xhat.
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for img in 0..n {
                        let base = (img * c + ch) * h * w;
                        for k in 0..h * w {
                            let xhat = (src[base + k] - mean[ch]) * inv;
                            let dy = gout[base + k];
                            sum_dy = sum_dy + dy;
                            sum_dy_xhat = sum_dy_xhat + dy * xhat;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let m = T::from_f64(count as f64);
                    for img in 0..n {
                        let base = (img * c + ch) * h * w;
                        for k in 0..h * w {
                            let dy = gout[base + k];
                            dx[base + k] = if eval {
                                gamma_v[ch] * inv * dy
                            } else {
                                let xhat = (src[base + k] - mean[ch]) * inv;
                                gamma_v[ch] * inv
                                    * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                            };
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::ConcatCh { parts } => {
                let out_shape = self.nodes[i].shape.clone();
                let (n, c_total, h, w) =
                    (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let mut ch_off = 0;
                for p in parts {
                    let pc = self.nodes[p.0].shape[1];
                    let mut delta = vec![T::zero(); n * pc * h * w];
                    for img in 0..n {
                        let src_base = (img * c_total + ch_off) * h * w;
                        delta[img * pc * h * w..(img + 1) * pc * h * w]
                            .copy_from_slice(&gout[src_base..src_base + pc * h * w]);
                    }
                    self.accumulate(p, &delta);
                    ch_off += pc;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, input) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let out_dim = self.nodes[w.0].shape[0];
                // dx = dy (n x out) * w (out x in)
                let mut dx = vec![T::zero(); n * input];
                T::gemm(
                    n,
                    out_dim,
                    input,
                    T::one(),
                    &gout,
                    &self.nodes[w.0].data,
                    T::zero(),
                    &mut dx,
                );
                // dw = dy^T (out x n) * x (n x in)
                let mut dyt = vec![T::zero(); out_dim * n];
                for r in 0..n {
                    for c in 0..out_dim {
                        dyt[c * n + r] = gout[r * out_dim + c];
                    }
                }
                let mut dw = vec![T::zero(); out_dim * input];
                T::gemm(
                    out_dim,
                    n,
                    input,
                    T::one(),
                    &dyt,
                    &self.nodes[x.0].data,
                    T::zero(),
                    &mut dw,
                );
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                if let Some(bias) = b {
                    let mut db = vec![T::zero(); out_dim];
                    for row in gout.chunks_exact(out_dim) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d = *d + *g;
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::L1Mean { a, b } => {
                let n = T::from_f64(self.nodes[a.0].data.len() as f64);
                let g = gout[0] / n;
                let mut da = vec![T::zero(); self.nodes[a.0].data.len()];
                let mut db = vec![T::zero(); da.len()];
                for (k, (x, y)) in self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .enumerate()
                {
                    let s = match (*x - *y).partial_cmp(&T::zero()) {
                        Some(std::cmp::Ordering::Greater) => T::one(),
                        Some(std::cmp::Ordering::Less) => -T::one(),
                        _ => T::zero(),
                    };
                    da[k] = g * s;
                    db[k] = -g * s;
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::CosineSim { a, b } => {
                let (mut dot, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
                for (x, y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
                    dot = dot + *x * *y;
                    na2 = na2 + *x * *x;
                    nb2 = nb2 + *y * *y;
                }
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let c = dot / (na * nb);
                let g = gout[0];
                let mut da = vec![T::zero(); self.nodes[a.0].data.len()];
                let mut db = vec![T::zero(); da.len()];
                for (k, (x, y)) in self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .enumerate()
                {
                    da[k] = g * (*y / (na * nb) - c * *x / na2);
                    db[k] = g * (*x / (na * nb) - c * *y / nb2);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Bce { pred, target } => {
                let eps = T::from_f64(BCE_EPS);
                let one = T::one();
                let n = T::from_f64(self.nodes[pred.0].data.len() as f64);
                let g = gout[0] / n;
                let mut dp = vec![T::zero(); self.nodes[pred.0].data.len()];
                for (k, (p, t)) in self.nodes[pred.0]
                    .data
                    .iter()
                    .zip(&self.nodes[target.0].data)
                    .enumerate()
                {
                    // Zero gradient inside the clamp region.
                    if *p <= eps || *p >= one - eps {
                        continue;
                    }
                    dp[k] = g * (*p - *t) / (*p * (one - *p));
                }
                self.accumulate(pred, &dp);
                // Targets are labels; no gradient path is defined for them.
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..32).map(|k| k as f64 * 0.25 - 3.0).collect();
        let x = g.leaf(&data, &[1, 2, 4, 4], false);
        // 3x3 kernels with a centered 1 on the matching channel.
        let mut w = vec![0.0; 2 * 2 * 9];
        w[4] = 1.0; // out 0 <- in 0
        w[2 * 9 + 9 + 4] = 1.0; // out 1 <- in 1
        let w = g.leaf(&w, &[2, 2, 3, 3], false);
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn maxpool_picks_the_maximum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], false);
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.data(y), &[4.0]);
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(&[0.3, -1.2, 2.0, 0.5], &[4], false);
        let c = g.cosine_sim(v, v).unwrap();
        assert!((g.scalar(c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_zero_vector_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&[0.0; 4], &[4], false);
        let b = g.leaf(&[1.0; 4], &[4], false);
        assert!(matches!(g.cosine_sim(a, b), Err(NnError::ZeroNorm)));
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(&[0.5; 8], &[8], false);
        let loss_real = g.bce_const(p, 1.0).unwrap();
        let loss_fake = g.bce_const(p, 0.0).unwrap();
        assert!((g.scalar(loss_real) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.scalar(loss_fake) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sum_loss_gives_unit_gradients() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..12).map(|k| k as f64).collect();
        let x = g.leaf(&data, &[3, 4], true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn untracked_leaf_receives_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&[1.0, 2.0], &[2], true);
        let frozen = g.leaf(&[3.0, 4.0], &[2], false);
        let s = g.add(a, frozen).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(frozen).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_untracked() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1.0, 2.0], &[2], true);
        assert!(matches!(g.backward(x), Err(NnError::NonScalarLoss(_))));
        let c = g.leaf(&[1.0], &[1], false);
        assert!(matches!(g.backward(c), Err(NnError::Untracked)));
    }

    #[test]
    fn conv_transpose_is_conv_adjoint() {
        // <conv(x), y> == <x, conv_transpose(y)> for a shared kernel.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        // Geometries with (h + 2p - k) divisible by the stride, so the
        // transpose output matches the conv input exactly.
        for (stride, pad, k, h) in [(2usize, 0usize, 2usize, 6usize), (1, 1, 3, 6), (2, 1, 3, 7)] {
            let (n, ci, co, w) = (2usize, 3usize, 4usize, h);
            let x: Vec<f64> = (0..n * ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kernel: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut g = Graph::<f64>::new();
            let xv = g.leaf(&x, &[n, ci, h, w], false);
            let wv = g.leaf(&kernel, &[co, ci, k, k], false);
            let yv = g.conv2d(xv, wv, None, stride, pad).unwrap();
            let y_shape = g.shape(yv).to_vec();
            let y: Vec<f64> = (0..g.data(yv).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs: f64 = g.data(yv).iter().zip(&y).map(|(a, b)| a * b).sum();

            let yv2 = g.leaf(&y, &y_shape, false);
            let back = g.conv_transpose2d(yv2, wv, None, stride, pad).unwrap();
            let rhs: f64 = g.data(back).iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0),
                "stride {stride} pad {pad} k {k}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_transpose_doubles_spatial_dims() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&vec![1.0; 2 * 3 * 5 * 7], &[2, 3, 5, 7], false);
        let w = g.leaf(&vec![0.5; 3 * 2 * 2 * 2], &[3, 2, 2, 2], false);
        let y = g.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 10, 14]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_uses_running() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..32).map(|k| k as f64 * 0.5).collect();
        let x = g.leaf(&data, &[2, 1, 4, 4], false);
        let gamma = g.leaf(&[1.0], &[1], false);
        let beta = g.leaf(&[0.0], &[1], false);
        let y = g.batchnorm(x, gamma, beta, None).unwrap();
        let out = g.data(y);
        let mean: f64 = out.iter().sum::<f64>() / out.len() as f64;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
        let (bm, bv) = g.batch_stats(y).unwrap();
        assert!((bm[0] - 7.75).abs() < 1e-9);

        // Eval mode with handpicked stats is a pure affine map.
        let rm = [1.0];
        let rv = [4.0];
        let y2 = g.batchnorm(x, gamma, beta, Some((&rm, &rv))).unwrap();
        for (orig, out) in data.iter().zip(g.data(y2)) {
            let want = (orig - 1.0) / (4.0f64 + 1e-5).sqrt();
            assert!((out - want).abs() < 1e-9);
        }
        let _ = bv;
    }

    #[test]
    fn concat_rejects_mismatched_spatial_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&vec![0.0; 16], &[1, 1, 4, 4], false);
        let b = g.leaf(&vec![0.0; 9], &[1, 1, 3, 3], false);
        assert!(matches!(
            g.concat_channels(&[a, b]),
            Err(NnError::ConcatMismatch(_))
        ));
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1.0, 2.0], &[2], true);
        let d = g.detach(x);
        assert!(!g.is_tracked(d));
        assert_eq!(g.data(d), g.data(x));
    }

    #[test]
    fn sigmoid_outputs_in_open_interval() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[-20.0, -1.0, 0.0, 1.0, 20.0], &[5], false);
        let y = g.sigmoid(x);
        for v in g.data(y) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        assert!((g.data(y)[2] - 0.5).abs() < 1e-12);
    }
}
