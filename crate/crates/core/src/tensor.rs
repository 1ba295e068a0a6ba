//! Dense `f32` tensors and a small reverse-mode tape.
//!
//! A [`Graph`] records primitive operations in topological order as they are
//! evaluated; [`Graph::backward`] walks the tape once in reverse to produce the
//! gradient of a scalar loss with respect to every node it depends on.
//!
//! Layout conventions: images are `[H, W, C]` row-major with the channel
//! index fastest, convolution kernels are `[kh, kw, c_in, c_out]`, dense
//! weights are `[out, in]`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: node {node} ({op}) has no backward rule")]
    NoBackwardRule { node: usize, op: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(mismatch("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, k: NodeId, b: NodeId },
    Relu(NodeId),
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    SoftmaxCe { logits: NodeId, label: usize, probs: Vec<f32> },
    Opaque { name: String, inputs: Vec<NodeId> },
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Dense { .. } => "dense".into(),
            Op::Conv2d { .. } => "conv2d".into(),
            Op::Relu(_) => "relu".into(),
            Op::MaxPool { .. } => "maxpool2x2".into(),
            Op::Add(..) => "add".into(),
            Op::Mul(..) => "mul".into(),
            Op::Scale(..) => "scale".into(),
            Op::Sum(_) => "sum".into(),
            Op::SoftmaxCe { .. } => "softmax_cross_entropy".into(),
            Op::Opaque { name, .. } => name.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded forward pass. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, or `None` if the loss does
    /// not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
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

    fn checked(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(TensorError::UnknownNode(id.0))
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Records a value computed outside the tape. Backward fails if the loss
    /// depends on it.
    pub fn opaque(&mut self, name: &str, inputs: &[NodeId], value: Tensor) -> NodeId {
        self.push(value, Op::Opaque { name: name.to_string(), inputs: inputs.to_vec() })
    }

    /// `w · flatten(x) + b` with `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.checked(x)?, self.checked(w)?, self.checked(b)?);
        if wv.shape.len() != 2 {
            return Err(mismatch("dense", format!("weight must be rank 2, got {:?}", wv.shape)));
        }
        let (out, inp) = (wv.shape[0], wv.shape[1]);
        if xv.numel() != inp {
            return Err(mismatch(
                "dense",
                format!("input has {} elements, weight expects {inp}", xv.numel()),
            ));
        }
        if bv.shape != [out] {
            return Err(mismatch("dense", format!("bias {:?}, expected [{out}]", bv.shape)));
        }
        let mut y = bv.data.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &wv.data[o * inp..(o + 1) * inp];
            *yo += row.iter().zip(&xv.data).map(|(a, b)| a * b).sum::<f32>();
        }
        Ok(self.push(Tensor { shape: vec![out], data: y }, Op::Dense { x, w, b }))
    }

    /// Stride-1 same-padded convolution, `x: [H, W, Cin]`, `k: [kh, kw, Cin, Cout]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, kv, bv) = (self.checked(x)?, self.checked(k)?, self.checked(b)?);
        let [h, w, cin] = rank3("conv2d", xv)?;
        if kv.shape.len() != 4 {
            return Err(mismatch("conv2d", format!("kernel must be rank 4, got {:?}", kv.shape)));
        }
        let (kh, kw, kcin, cout) = (kv.shape[0], kv.shape[1], kv.shape[2], kv.shape[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(mismatch("conv2d", format!("kernel {kh}x{kw} must have odd sides")));
        }
        if kcin != cin {
            return Err(mismatch("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if bv.shape != [cout] {
            return Err(mismatch("conv2d", format!("bias {:?}, expected [{cout}]", bv.shape)));
        }
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut out = vec![0.0f32; h * w * cout];
        for r in 0..h {
            for c in 0..w {
                let dst = &mut out[(r * w + c) * cout..(r * w + c + 1) * cout];
                dst.copy_from_slice(&bv.data);
                for dy in 0..kh {
                    let sr = r as isize + dy as isize - ph;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let sc = c as isize + dx as isize - pw;
                        if sc < 0 || sc >= w as isize {
                            continue;
                        }
                        let src = (sr as usize * w + sc as usize) * cin;
                        for ci in 0..cin {
                            let xv = xv.data[src + ci];
                            let kbase = ((dy * kw + dx) * cin + ci) * cout;
                            for (d, kk) in dst.iter_mut().zip(&kv.data[kbase..kbase + cout]) {
                                *d += xv * kk;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![h, w, cout], data: out }, Op::Conv2d { x, k, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.checked(x)?.map(|a| a.max(0.0));
        Ok(self.push(v, Op::Relu(x)))
    }

    /// 2×2 max pooling with stride 2 over `[H, W, C]`; H and W must be even.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.checked(x)?;
        let [h, w, c] = rank3("maxpool2x2", xv)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(mismatch("maxpool2x2", format!("spatial size {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for r in 0..oh {
            for col in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((2 * r) * w + 2 * col) * c + ch;
                    let mut best = xv.data[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * r + dy) * w + 2 * col + dx) * c + ch;
                        if xv.data[i] > best {
                            best = xv.data[i];
                            best_i = i;
                        }
                    }
                    let o = (r * ow + col) * c + ch;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![oh, ow, c], data: out }, Op::MaxPool { x, argmax }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.checked(a)?, self.checked(b)?);
        if av.shape != bv.shape {
            return Err(mismatch("add", format!("{:?} vs {:?}", av.shape, bv.shape)));
        }
        let mut v = av.clone();
        v.add_assign(bv);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.checked(a)?, self.checked(b)?);
        if av.shape != bv.shape {
            return Err(mismatch("mul", format!("{:?} vs {:?}", av.shape, bv.shape)));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let v = Tensor { shape: av.shape.clone(), data };
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> Result<NodeId> {
        let v = self.checked(a)?.map(|x| x * factor);
        Ok(self.push(v, Op::Scale(a, factor)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.checked(a)?.data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    /// Mean-free scalar cross-entropy `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = self.checked(logits)?;
        if lv.shape.len() != 1 {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("logits must be rank 1, got {:?}", lv.shape),
            ));
        }
        if label >= lv.numel() {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("label {label} out of range for {} classes", lv.numel()),
            ));
        }
        let probs = softmax(&lv.data);
        let max = lv.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + lv.data.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
        let loss = lse - lv.data[label];
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_cross_entropy" });
        }
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, label, probs }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.checked(loss)?;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![1.0] });

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                // with no inputs it is just a constant
                Op::Opaque { inputs, .. } if inputs.is_empty() => {}
                Op::Opaque { .. } => {
                    return Err(TensorError::NoBackwardRule { node: idx, op: node.op.name() });
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (out, inp) = (wv.shape[0], wv.shape[1]);
                    let mut gx = vec![0.0f32; inp];
                    let mut gw = vec![0.0f32; out * inp];
                    for o in 0..out {
                        let go = g.data[o];
                        let row = &wv.data[o * inp..(o + 1) * inp];
                        for (gxi, wi) in gx.iter_mut().zip(row) {
                            *gxi += go * wi;
                        }
                        for (gwi, xi) in gw[o * inp..(o + 1) * inp].iter_mut().zip(&xv.data) {
                            *gwi = go * xi;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape.clone(), data: gx });
                    accumulate(&mut grads, *w, Tensor { shape: wv.shape.clone(), data: gw });
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Conv2d { x, k, b } => {
                    let (gx, gk, gb) = conv2d_backward(self.value(*x), self.value(*k), &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape.clone(), data });
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let mut data = vec![0.0f32; xv.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        data[src] += g.data[o];
                    }
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape.clone(), data });
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    let gb = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, Tensor { shape: av.shape.clone(), data: ga });
                    accumulate(&mut grads, *b, Tensor { shape: bv.shape.clone(), data: gb });
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.map(|v| v * f));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::full(&av.shape, g.data[0]));
                }
                Op::SoftmaxCe { logits, label, probs } => {
                    let mut data: Vec<f32> = probs.iter().map(|p| p * g.data[0]).collect();
                    data[*label] -= g.data[0];
                    let shape = self.value(*logits).shape.clone();
                    accumulate(&mut grads, *logits, Tensor { shape, data });
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn rank3(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match t.shape[..] {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(mismatch(op, format!("expected [H, W, C], got {:?}", t.shape))),
    }
}

fn conv2d_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (h, w, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, cout) = (k.shape[0], k.shape[1], k.shape[3]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut gx = vec![0.0f32; x.numel()];
    let mut gk = vec![0.0f32; k.numel()];
    let mut gb = vec![0.0f32; cout];
    for r in 0..h {
        for c in 0..w {
            let go = &g.data[(r * w + c) * cout..(r * w + c + 1) * cout];
            for (b, v) in gb.iter_mut().zip(go) {
                *b += v;
            }
            for dy in 0..kh {
                let sr = r as isize + dy as isize - ph;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let sc = c as isize + dx as isize - pw;
                    if sc < 0 || sc >= w as isize {
                        continue;
                    }
                    let src = (sr as usize * w + sc as usize) * cin;
                    for ci in 0..cin {
                        let kbase = ((dy * kw + dx) * cin + ci) * cout;
                        let krow = &k.data[kbase..kbase + cout];
                        let xv = x.data[src + ci];
                        let mut acc = 0.0f32;
                        for ((gkv, kv), gov) in gk[kbase..kbase + cout].iter_mut().zip(krow).zip(go) {
                            acc += gov * kv;
                            *gkv += xv * gov;
                        }
                        gx[src + ci] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor { shape: x.shape.clone(), data: gx },
        Tensor { shape: k.shape.clone(), data: gk },
        Tensor { shape: vec![cout], data: gb },
    )
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Central-difference gradient estimate of a scalar function.
pub fn finite_diff_grad<E>(
    mut f: impl FnMut(&Tensor) -> std::result::Result<f32, E>,
    x: &Tensor,
    h: f32,
) -> std::result::Result<Tensor, E> {
    assert!(h > 0.0, "finite_diff_grad: step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe)?;
        probe.data[i] = orig - h;
        let minus = f(&probe)?;
        probe.data[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let loss = g.softmax_cross_entropy(l, 0).unwrap();
        assert!((g.value(loss).item() - std::f32::consts::LN_2).abs() < 1e-6);
        let grads = g.backward(loss).unwrap();
        let gl = grads.get(l).unwrap().data();
        assert!((gl[0] + 0.5).abs() < 1e-6 && (gl[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn identity_kernel_convolution_is_identity() {
        let mut g = Graph::new();
        let img: Vec<f32> = (0..5 * 4 * 2).map(|i| i as f32 * 0.1).collect();
        let x = g.leaf(Tensor::new(vec![5, 4, 2], img.clone()).unwrap());
        let mut k = vec![0.0; 3 * 3 * 2 * 2];
        // center tap, ci -> co identity
        k[((3 + 1) * 2) * 2] = 1.0;
        k[((3 + 1) * 2 + 1) * 2 + 1] = 1.0;
        let k = g.leaf(Tensor::new(vec![3, 3, 2, 2], k).unwrap());
        let b = g.leaf(Tensor::zeros(&[2]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 4, 2]);
        assert_eq!(g.value(y).data(), &img[..]);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0, 7.5]);
        let fd = finite_diff_grad(|t| Ok::<_, ()>(t.data().iter().sum()), &x, 1e-3).unwrap();
        for v in fd.data() {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
        let sq = finite_diff_grad(|t| Ok::<_, ()>(t.item() * t.item()), &Tensor::scalar(3.0), 1e-3)
            .unwrap();
        assert!((sq.item() - 6.0).abs() < 1e-2);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        let w = g.leaf(Tensor::zeros(&[2, 4]));
        let b = g.leaf(Tensor::zeros(&[2]));
        let err = g.dense(x, w, b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "dense", .. }), "{err}");
        assert!(err.to_string().contains('3') && err.to_string().contains('4'));

        let img = g.leaf(Tensor::zeros(&[3, 3, 1]));
        assert!(matches!(
            g.maxpool2x2(img).unwrap_err(),
            TensorError::ShapeMismatch { op: "maxpool2x2", .. }
        ));
        let a = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, x).unwrap_err(), TensorError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn backward_rejects_non_scalar_and_opaque() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
        let o = g.opaque("argmax", &[x], Tensor::scalar(0.0));
        let s = g.scale(o, 2.0).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::NoBackwardRule { .. })));
    }

    #[test]
    fn zero_sized_shapes_rejected() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
