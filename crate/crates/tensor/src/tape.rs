use crate::kernels::{self, ConvGeom};
use crate::optim::ParamStore;
use crate::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Deliberately wrong backward rules, used to show the gradient checker bites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// relu passes twice the incoming gradient.
    ReluGradDoubled,
    /// conv2d weight gradient is scaled by 2.
    ConvWeightGradDoubled,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Fault::ReluGradDoubled),
            "conv2d" => Some(Fault::ConvWeightGradDoubled),
            _ => None,
        }
    }
}

type R<T> = Result<T, TensorError>;

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        n: usize,
    },
    Gather {
        x: Var,
        idx: Vec<u32>,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    WeightedSum(Var, Vec<T>),
    Reshape(Var),
    Softmax(Var),
    SmoothL1 {
        pre: Var,
        gt: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        gt: Vec<T>,
    },
    Bce {
        pre: Var,
        gt: Vec<T>,
        mean: bool,
    },
    BceLogits {
        logits: Var,
        gt: Vec<T>,
        mean: bool,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Records a computation for reverse-mode differentiation.
///
/// One tape per logical execution context; separate tapes may be used from
/// separate threads.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Clamp used by the probability losses.
pub const PROB_EPS: f64 = 1e-7;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self { nodes: Vec::new(), fault }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a named parameter; its gradient is tracked iff it is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> R<Var> {
        let p = store.get(name).ok_or_else(|| TensorError::Shape {
            op: "param",
            message: format!("unknown parameter {name:?}"),
        })?;
        let v = self.leaf(p.value.clone(), p.trainable);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of every trainable parameter recorded on this tape, in
    /// recording order. A parameter recorded twice appears twice.
    pub fn param_grads(&self) -> Vec<(String, Vec<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| {
                let name = n.param.as_ref()?;
                let g = n.grad.clone().unwrap_or_else(|| vec![T::zero(); n.value.len()]);
                n.requires_grad.then(|| (name.clone(), g))
            })
            .collect()
    }

    // ---- structural ops ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> R<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("input {xs:?} and weight {ws:?} must be 4-d"));
        }
        if xs[1] != ws[1] {
            return shape_err("conv2d", format!("input channels {} vs weight {:?}", xs[1], ws));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return shape_err("conv2d", format!("kernel {ws:?} does not fit input {xs:?} with pad {pad}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0]));
            }
        }
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let out = kernels::conv_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), xs[0], &geom);
        let value = Tensor::new(vec![xs[0], geom.o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom, n: xs[0] }, &inputs))
    }

    /// `out[i] = x[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, shape: Vec<usize>, idx: Vec<u32>) -> R<Var> {
        if numel(&shape) != idx.len() {
            return shape_err("gather", format!("{} indices for shape {shape:?}", idx.len()));
        }
        let src = self.data(x);
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= src.len()) {
            return shape_err("gather", format!("index {bad} out of {}", src.len()));
        }
        let data = idx.iter().map(|&i| src[i as usize]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x, idx }, &[x]))
    }

    fn nchw(&self, op: &'static str, x: Var) -> R<[usize; 4]> {
        match *self.shape(x) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => shape_err(op, format!("expected (n, c, h, w), got {s:?}")),
        }
    }

    fn windowed(&mut self, x: Var, rows: Vec<(usize, usize)>, cols: Vec<(usize, usize)>) -> R<Var> {
        let [n, c, h, w] = self.nchw("pool", x)?;
        let (_, idx) = kernels::window_max(self.data(x), n * c, h, w, &rows, &cols);
        self.gather(x, vec![n, c, rows.len(), cols.len()], idx)
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> R<Var> {
        let [_, _, h, w] = self.nchw("maxpool2d", x)?;
        if k == 0 || stride == 0 || h < k || w < k {
            return shape_err("maxpool2d", format!("window {k} stride {stride} on {h}x{w}"));
        }
        self.windowed(x, kernels::strided_windows(h, k, stride), kernels::strided_windows(w, k, stride))
    }

    /// Max over an `out_h x out_w` grid of floor/ceil subwindows.
    pub fn adaptive_maxpool2d(&mut self, x: Var, out_hw: (usize, usize)) -> R<Var> {
        let [_, _, h, w] = self.nchw("adaptive_maxpool2d", x)?;
        if out_hw.0 == 0 || out_hw.1 == 0 || h == 0 || w == 0 {
            return shape_err("adaptive_maxpool2d", format!("{h}x{w} -> {out_hw:?}"));
        }
        self.windowed(x, kernels::adaptive_windows(0, h, out_hw.0), kernels::adaptive_windows(0, w, out_hw.1))
    }

    /// Adaptive max pooling of `bbox = [x1, y1, x2, y2]` (feature-map units)
    /// onto an `out_hw` grid. The box is clipped to the map first.
    pub fn roi_pool(&mut self, x: Var, bbox: [f64; 4], out_hw: (usize, usize)) -> R<Var> {
        let [n, _, h, w] = self.nchw("roi_pool", x)?;
        if n != 1 {
            return shape_err("roi_pool", format!("expects a single map, got batch {n}"));
        }
        if out_hw.0 == 0 || out_hw.1 == 0 {
            return shape_err("roi_pool", "empty output grid");
        }
        let x1 = bbox[0].clamp(0.0, w as f64);
        let x2 = bbox[2].clamp(0.0, w as f64);
        let y1 = bbox[1].clamp(0.0, h as f64);
        let y2 = bbox[3].clamp(0.0, h as f64);
        if !(x2 > x1 && y2 > y1) {
            return Err(TensorError::EmptyRoi(bbox));
        }
        let (c0, c1) = (x1.floor() as usize, (x2.ceil() as usize).min(w));
        let (r0, r1) = (y1.floor() as usize, (y2.ceil() as usize).min(h));
        let rows = kernels::adaptive_windows(r0, r1 - r0, out_hw.0);
        let cols = kernels::adaptive_windows(c0, c1 - c0, out_hw.1);
        self.windowed(x, rows, cols)
    }

    pub fn upsample_nearest(&mut self, x: Var, out_hw: (usize, usize)) -> R<Var> {
        let [n, c, h, w] = self.nchw("upsample_nearest", x)?;
        let (oh, ow) = out_hw;
        if oh < h || ow < w {
            return shape_err("upsample_nearest", format!("{h}x{w} -> {oh}x{ow} shrinks"));
        }
        let mut idx = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for i in 0..oh {
                let si = i * h / oh;
                for j in 0..ow {
                    idx.push((p * h * w + si * w + j * w / ow) as u32);
                }
            }
        }
        self.gather(x, vec![n, c, oh, ow], idx)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> R<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            idx.extend((base..base + len * inner).map(|i| i as u32));
        }
        let mut shape = s;
        shape[axis] = len;
        self.gather(x, shape, idx)
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> R<Vec<Var>> {
        let total = self.shape(x).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != total {
            return shape_err("split", format!("sizes {sizes:?} vs axis length {total}"));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// `(n, c, h, w)` to `(n*h*w, c)`: one row per spatial position.
    pub fn channels_last(&mut self, x: Var) -> R<Var> {
        let [n, c, h, w] = self.nchw("channels_last", x)?;
        let hw = h * w;
        let mut idx = Vec::with_capacity(n * c * hw);
        for b in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    idx.push(((b * c + ch) * hw + p) as u32);
                }
            }
        }
        self.gather(x, vec![n * hw, c], idx)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> R<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> R<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "no inputs");
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return shape_err("concat", format!("axis {axis} on {s0:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != s0[i]) {
                return shape_err("concat", format!("{s:?} vs {s0:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer = numel(&s0[..axis]);
        let inner = numel(&s0[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    // ---- elementwise and dense ops ----

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> R<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Sum of several same-shape values; a lone value is returned unchanged.
    pub fn add_all(&mut self, xs: &[Var]) -> R<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return shape_err("add_all", "no inputs");
        };
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `sum_i w_i * x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> R<Var> {
        if w.len() != self.value(x).len() {
            return shape_err("weighted_sum", format!("{} weights for {:?}", w.len(), self.shape(x)));
        }
        let s = self.data(x).iter().zip(&w).fold(T::zero(), |a, (&v, &c)| a + v * c);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w), &[x]))
    }

    /// `x (n, in) * w^T (in, out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> R<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", format!("input {xs:?} weight {ws:?}"));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return shape_err("linear", format!("bias {:?} for {m} outputs", self.shape(b)));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(self.data(b));
            }
        }
        T::gemm(n, k, m, self.data(x), k as isize, 1, self.data(w), 1, k as isize, T::one(), &mut out);
        let value = Tensor::new(vec![n, m], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> R<Var> {
        let s = self.shape(x).to_vec();
        let Some(&k) = s.last() else {
            return shape_err("softmax", "scalar input");
        };
        let data = kernels::softmax_rows(self.data(x), k);
        Ok(self.push(Tensor::new(s, data)?, Op::Softmax(x), &[x]))
    }

    // ---- losses ----

    fn target(&self, op: &'static str, v: Var, gt: &Tensor<T>) -> R<Vec<T>> {
        if gt.shape() != self.shape(v) {
            return shape_err(op, format!("target {:?} vs prediction {:?}", gt.shape(), self.shape(v)));
        }
        Ok(gt.data().to_vec())
    }

    /// Mean over all elements of the smooth L1 penalty.
    pub fn smooth_l1(&mut self, gt: &Tensor<T>, pre: Var) -> R<Var> {
        let gt = self.target("smooth_l1", pre, gt)?;
        let n = gt.len().max(1);
        let half = T::of(0.5);
        let s = self.data(pre).iter().zip(&gt).fold(T::zero(), |a, (&p, &g)| {
            let d = (g - p).abs();
            a + if d < T::one() { half * d * d } else { d - half }
        });
        let value = Tensor::scalar(s / T::of(n as f64));
        Ok(self.push(value, Op::SmoothL1 { pre, gt }, &[pre]))
    }

    /// `-sum gt * log softmax(logits)` over the last axis, summed over rows.
    pub fn cross_entropy(&mut self, gt_onehot: &Tensor<T>, logits: Var) -> R<Var> {
        let gt = self.target("cross_entropy", logits, gt_onehot)?;
        let k = *self.shape(logits).last().unwrap_or(&1);
        let mut s = T::zero();
        for (z, g) in self.data(logits).chunks(k).zip(gt.chunks(k)) {
            let m = z.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = m + z.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
            s = z.iter().zip(g).fold(s, |a, (&zi, &gi)| a + gi * (lse - zi));
        }
        Ok(self.push(Tensor::scalar(s), Op::CrossEntropy { logits, gt }, &[logits]))
    }

    /// Binary cross-entropy on probabilities, clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, gt: &Tensor<T>, pre_prob: Var, mean: bool) -> R<Var> {
        let gt = self.target("bce", pre_prob, gt)?;
        let s = self.data(pre_prob).iter().zip(&gt).fold(T::zero(), |a, (&p, &g)| {
            let p = clamp_prob(p);
            a - (g * p.ln() + (T::one() - g) * (T::one() - p).ln())
        });
        let value = Tensor::scalar(reduce(s, gt.len(), mean));
        Ok(self.push(value, Op::Bce { pre: pre_prob, gt, mean }, &[pre_prob]))
    }

    /// Binary cross-entropy of `sigmoid(logits)`, evaluated stably.
    pub fn bce_logits(&mut self, gt: &Tensor<T>, logits: Var, mean: bool) -> R<Var> {
        let gt = self.target("bce_logits", logits, gt)?;
        let s = self.data(logits).iter().zip(&gt).fold(T::zero(), |a, (&z, &g)| {
            a + z.max(T::zero()) - z * g + (-z.abs()).exp().ln_1p()
        });
        let value = Tensor::scalar(reduce(s, gt.len(), mean));
        Ok(self.push(value, Op::BceLogits { logits, gt, mean }, &[logits]))
    }

    /// `-sum_r log p[r, label_r]` for probability rows over the last axis.
    pub fn nll_relation(&mut self, probs: Var, labels: &[usize]) -> R<Var> {
        let s = self.shape(probs).to_vec();
        let k = *s.last().unwrap_or(&0);
        let rows = if k == 0 { 0 } else { self.value(probs).len() / k };
        if rows != labels.len() || labels.iter().any(|&l| l >= k) {
            return shape_err("nll_relation", format!("labels {labels:?} for probabilities {s:?}"));
        }
        let p = self.data(probs);
        let v = labels
            .iter()
            .enumerate()
            .fold(T::zero(), |a, (r, &l)| a - clamp_prob(p[r * k + l]).ln());
        Ok(self.push(
            Tensor::scalar(v),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        ))
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: Var) -> R<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalar(self.shape(loss).to_vec()));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &gy);
            self.nodes[i].grad = Some(gy);
            for (v, g) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a = *a + b;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, n } => {
                let (dx, dw, db) = kernels::conv_backward(
                    self.data(*x),
                    self.data(*w),
                    gy,
                    *n,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(mut dw) = dw {
                    if self.fault == Some(Fault::ConvWeightGradDoubled) {
                        dw.iter_mut().for_each(|g| *g = *g + *g);
                    }
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&j, &g) in idx.iter().zip(gy) {
                    dx[j as usize] = dx[j as usize] + g;
                }
                out.push((*x, dx));
            }
            Op::Relu(x) => {
                let k = if self.fault == Some(Fault::ReluGradDoubled) { T::of(2.0) } else { T::one() };
                let dx = self
                    .data(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&a, &g)| if a > T::zero() { k * g } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let dx = y.iter().zip(gy).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    T::gemm(n, m, k, gy, m as isize, 1, self.data(*w), k as isize, 1, T::zero(), &mut dx);
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gy, 1, m as isize, self.data(*x), k as isize, 1, T::zero(), &mut dw);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); m];
                    for row in gy.chunks(m) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Concat { xs, axis } => {
                let s = self.nodes[i].value.shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let mut parts: Vec<Vec<T>> = xs.iter().map(|v| Vec::with_capacity(self.value(*v).len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (v, part) in xs.iter().zip(&mut parts) {
                        let chunk = self.shape(*v)[*axis] * inner;
                        part.extend_from_slice(&gy[off..off + chunk]);
                        off += chunk;
                    }
                }
                out.extend(xs.iter().copied().zip(parts));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Scale(x, c) => out.push((*x, gy.iter().map(|&g| g * *c).collect())),
            Op::Sum(x) => out.push((*x, vec![gy[0]; self.value(*x).len()])),
            Op::WeightedSum(x, w) => out.push((*x, w.iter().map(|&c| c * gy[0]).collect())),
            Op::Reshape(x) => out.push((*x, gy.to_vec())),
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let k = *self.shape(*x).last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(gy.chunks(k)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &g)| a + p * g);
                    dx.extend(yr.iter().zip(gr).map(|(&p, &g)| p * (g - dot)));
                }
                out.push((*x, dx));
            }
            Op::SmoothL1 { pre, gt } => {
                let c = gy[0] / T::of(gt.len().max(1) as f64);
                let dx = self
                    .data(*pre)
                    .iter()
                    .zip(gt)
                    .map(|(&p, &g)| {
                        let d = p - g;
                        c * if d.abs() < T::one() { d } else { d.signum() }
                    })
                    .collect();
                out.push((*pre, dx));
            }
            Op::CrossEntropy { logits, gt } => {
                let k = *self.shape(*logits).last().unwrap_or(&1);
                let sm = kernels::softmax_rows(self.data(*logits), k);
                let mut dx = Vec::with_capacity(sm.len());
                for (p, g) in sm.chunks(k).zip(gt.chunks(k)) {
                    let mass = g.iter().fold(T::zero(), |a, &v| a + v);
                    dx.extend(p.iter().zip(g).map(|(&pi, &gi)| gy[0] * (mass * pi - gi)));
                }
                out.push((*logits, dx));
            }
            Op::Bce { pre, gt, mean } => {
                let c = reduce(gy[0], gt.len(), *mean);
                let lo = T::of(PROB_EPS);
                let hi = T::one() - lo;
                let dx = self
                    .data(*pre)
                    .iter()
                    .zip(gt)
                    .map(|(&p, &g)| {
                        if p < lo || p > hi {
                            T::zero()
                        } else {
                            c * (p - g) / (p * (T::one() - p))
                        }
                    })
                    .collect();
                out.push((*pre, dx));
            }
            Op::BceLogits { logits, gt, mean } => {
                let c = reduce(gy[0], gt.len(), *mean);
                let dx = self.data(*logits).iter().zip(gt).map(|(&z, &g)| c * (sigmoid(z) - g)).collect();
                out.push((*logits, dx));
            }
            Op::Nll { probs, labels } => {
                let p = self.data(*probs);
                let k = *self.shape(*probs).last().unwrap();
                let lo = T::of(PROB_EPS);
                let mut dx = vec![T::zero(); p.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let v = p[r * k + l];
                    if v >= lo {
                        dx[r * k + l] = dx[r * k + l] - gy[0] / v;
                    }
                }
                out.push((*probs, dx));
            }
        }
        out
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(PROB_EPS);
    p.max(lo).min(T::one() - lo)
}

fn reduce<T: Scalar>(s: T, n: usize, mean: bool) -> T {
    if mean {
        s / T::of(n.max(1) as f64)
    } else {
        s
    }
}
