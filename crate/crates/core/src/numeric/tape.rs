//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value. Nodes whose inputs
//! carry no gradient are stored as constants, so inference passes keep no saved
//! activations. `backward` walks the node list once in reverse.

use super::kernels::{bce_with_logit, gemm, sigmoid, ConvGeometry, MatRef};
use super::{NumericError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive selector for [`Tape::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// NHWC input `[N,H,W,Cin]`, kernel `[KH,KW,Cin,Cout]`, stride 1, symmetric zero padding.
    Conv2d {
        padding: usize,
    },
    /// 2×2 window, stride 2, over NHWC input; odd trailing rows/columns are dropped.
    MaxPool2,
    /// `[N,H,W,C] -> [N,C]` spatial mean.
    GlobalAvgPool,
    /// `[m,k]·[k,n]`.
    MatMul,
    /// `[m,k]·[n,k]ᵀ`, the layout of a linear layer's weight rows.
    MatMulTransB,
    /// Adds a vector along the last axis.
    BiasAdd,
    Relu,
    Sigmoid,
    Add,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    /// Mean binary cross-entropy of `sigmoid(logits)` against constant targets of the same shape.
    BceWithLogits,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::MatMul => "matmul",
            OpKind::MatMulTransB => "matmul_transb",
            OpKind::BiasAdd => "bias_add",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Conv2d { .. }
            | OpKind::MatMul
            | OpKind::MatMulTransB
            | OpKind::BiasAdd
            | OpKind::Add
            | OpKind::Mul
            | OpKind::BceWithLogits => 2,
            _ => 1,
        }
    }
}

/// Per-op state kept for the backward pass.
enum Saved {
    None,
    Conv { geom: ConvGeometry, cols: Vec<f64> },
    PoolArgmax(Vec<usize>),
}

enum Recorded {
    Leaf,
    Constant,
    Op {
        kind: OpKind,
        inputs: Vec<Var>,
        saved: Saved,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    recorded: Recorded,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(kind: &OpKind, detail: String) -> NumericError {
    NumericError::Shape(format!("{}: {detail}", kind.name()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape as a leaf; gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            needs_grad: tensor.requires_grad(),
            recorded: Recorded::Leaf,
        })
    }

    /// Like [`Tape::leaf`] but overrides gradient tracking, e.g. to run a frozen forward pass.
    pub fn leaf_with(&mut self, tensor: &Tensor, track: bool) -> Var {
        let v = self.leaf(tensor);
        self.nodes[v.0].needs_grad = track && tensor.requires_grad();
        v
    }

    /// Moves an owned buffer onto the tape as a constant.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var, NumericError> {
        let t = Tensor::new(shape, value)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Node {
            shape,
            value: t.into_data(),
            needs_grad: false,
            recorded: Recorded::Leaf,
        }))
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn to_tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        Tensor::new(node.shape.clone(), node.value.clone())
            .expect("tape nodes hold consistent shapes")
    }

    /// The ReLU sides and max-pool winners taken by every recorded op. Two evaluations with
    /// equal signatures lie on the same piece of the piecewise-smooth function.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.recorded {
                Recorded::Op {
                    kind: OpKind::Relu,
                    inputs,
                    ..
                } => sig.extend(
                    self.nodes[inputs[0].0]
                        .value
                        .iter()
                        .map(|&v| usize::from(v > 0.0)),
                ),
                Recorded::Op {
                    saved: Saved::PoolArgmax(arg),
                    ..
                } => sig.extend_from_slice(arg),
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var, NumericError> {
        self.apply(OpKind::Conv2d { padding }, &[x, w])
    }
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::MaxPool2, &[x])
    }
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::GlobalAvgPool, &[x])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::MatMulTransB, &[a, b])
    }
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::BiasAdd, &[x, b])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Sigmoid, &[x])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumericError> {
        self.apply(OpKind::Scale(factor), &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Mean, &[x])
    }
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::BceWithLogits, &[logits, targets])
    }

    /// Evaluates one primitive and records it when any input needs a gradient.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, NumericError> {
        if inputs.len() != kind.arity() {
            return Err(shape_err(
                &kind,
                format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(shape_err(
                &kind,
                format!("input {bad:?} is not on this tape"),
            ));
        }
        let needs_grad = match kind {
            OpKind::BceWithLogits => self.nodes[inputs[0].0].needs_grad,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        let (shape, value, saved) = self.forward(&kind, inputs, needs_grad)?;
        if value.iter().any(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite(kind.name()));
        }
        let recorded = if needs_grad {
            Recorded::Op {
                kind,
                inputs: inputs.to_vec(),
                saved,
            }
        } else {
            Recorded::Constant
        };
        Ok(self.push(Node {
            shape,
            value,
            needs_grad,
            recorded,
        }))
    }

    fn forward(
        &self,
        kind: &OpKind,
        inputs: &[Var],
        needs_grad: bool,
    ) -> Result<(Vec<usize>, Vec<f64>, Saved), NumericError> {
        let node = |i: usize| &self.nodes[inputs[i].0];
        match *kind {
            OpKind::Conv2d { padding } => {
                let (x, w) = (node(0), node(1));
                let (&[n, h, wd, cin], &[kh, kw, wcin, cout]) =
                    (x.shape.as_slice(), w.shape.as_slice())
                else {
                    return Err(shape_err(
                        kind,
                        format!(
                            "input {:?} / kernel {:?} must both be rank 4",
                            x.shape, w.shape
                        ),
                    ));
                };
                if cin != wcin || h + 2 * padding < kh || wd + 2 * padding < kw {
                    return Err(shape_err(
                        kind,
                        format!(
                            "input {:?} incompatible with kernel {:?} at padding {padding}",
                            x.shape, w.shape
                        ),
                    ));
                }
                let geom = ConvGeometry {
                    batch: n,
                    in_h: h,
                    in_w: wd,
                    in_c: cin,
                    k_h: kh,
                    k_w: kw,
                    out_c: cout,
                    pad: padding,
                };
                let cols = geom.im2col(&x.value);
                let rows = geom.out_rows();
                let mut out = vec![0.0; rows * cout];
                gemm(
                    rows,
                    geom.patch_len(),
                    cout,
                    MatRef::rows(&cols, geom.patch_len()),
                    MatRef::rows(&w.value, cout),
                    0.0,
                    &mut out,
                );
                let saved = if needs_grad {
                    Saved::Conv { geom, cols }
                } else {
                    Saved::None
                };
                Ok((vec![n, geom.out_h(), geom.out_w(), cout], out, saved))
            }
            OpKind::MaxPool2 => {
                let x = node(0);
                let &[n, h, w, c] = x.shape.as_slice() else {
                    return Err(shape_err(
                        kind,
                        format!("input {:?} must be rank 4", x.shape),
                    ));
                };
                if h < 2 || w < 2 {
                    return Err(shape_err(
                        kind,
                        format!("input {:?} too small for a 2×2 window", x.shape),
                    ));
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; n * oh * ow * c];
                let mut arg = vec![0usize; out.len()];
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let dst = ((b * oh + oy) * ow + ox) * c;
                            for ch in 0..c {
                                let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                                let mut best = x.value[best_idx];
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                    if x.value[idx] > best {
                                        best = x.value[idx];
                                        best_idx = idx;
                                    }
                                }
                                out[dst + ch] = best;
                                arg[dst + ch] = best_idx;
                            }
                        }
                    }
                }
                let saved = if needs_grad {
                    Saved::PoolArgmax(arg)
                } else {
                    Saved::None
                };
                Ok((vec![n, oh, ow, c], out, saved))
            }
            OpKind::GlobalAvgPool => {
                let x = node(0);
                let &[n, h, w, c] = x.shape.as_slice() else {
                    return Err(shape_err(
                        kind,
                        format!("input {:?} must be rank 4", x.shape),
                    ));
                };
                let hw = h * w;
                let mut out = vec![0.0; n * c];
                for b in 0..n {
                    let acc = &mut out[b * c..(b + 1) * c];
                    for p in 0..hw {
                        let src = &x.value[(b * hw + p) * c..(b * hw + p + 1) * c];
                        acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                    }
                    acc.iter_mut().for_each(|a| *a /= hw as f64);
                }
                Ok((vec![n, c], out, Saved::None))
            }
            OpKind::MatMul | OpKind::MatMulTransB => {
                let (a, b) = (node(0), node(1));
                let (&[m, k], &[b0, b1]) = (a.shape.as_slice(), b.shape.as_slice()) else {
                    return Err(shape_err(
                        kind,
                        format!("operands {:?} and {:?} must be rank 2", a.shape, b.shape),
                    ));
                };
                let trans = matches!(kind, OpKind::MatMulTransB);
                let (bk, n) = if trans { (b1, b0) } else { (b0, b1) };
                if bk != k {
                    return Err(shape_err(
                        kind,
                        format!("inner dimensions differ: {:?} vs {:?}", a.shape, b.shape),
                    ));
                }
                let bref = if trans {
                    MatRef::transposed(&b.value, k)
                } else {
                    MatRef::rows(&b.value, n)
                };
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, MatRef::rows(&a.value, k), bref, 0.0, &mut out);
                Ok((vec![m, n], out, Saved::None))
            }
            OpKind::BiasAdd => {
                let (x, b) = (node(0), node(1));
                let last = *x.shape.last().unwrap_or(&0);
                if b.shape.len() != 1 || b.shape[0] != last {
                    return Err(shape_err(
                        kind,
                        format!(
                            "bias {:?} does not match last axis of {:?}",
                            b.shape, x.shape
                        ),
                    ));
                }
                let mut out = x.value.clone();
                out.chunks_mut(last)
                    .for_each(|row| row.iter_mut().zip(&b.value).for_each(|(o, bv)| *o += bv));
                Ok((x.shape.clone(), out, Saved::None))
            }
            OpKind::Relu => {
                let x = node(0);
                Ok((
                    x.shape.clone(),
                    x.value.iter().map(|&v| v.max(0.0)).collect(),
                    Saved::None,
                ))
            }
            OpKind::Sigmoid => {
                let x = node(0);
                Ok((
                    x.shape.clone(),
                    x.value.iter().map(|&v| sigmoid(v)).collect(),
                    Saved::None,
                ))
            }
            OpKind::Add | OpKind::Mul | OpKind::BceWithLogits => {
                let (a, b) = (node(0), node(1));
                if a.shape != b.shape {
                    return Err(shape_err(
                        kind,
                        format!("operand shapes differ: {:?} vs {:?}", a.shape, b.shape),
                    ));
                }
                let pairs = a.value.iter().zip(&b.value);
                match kind {
                    OpKind::Add => Ok((
                        a.shape.clone(),
                        pairs.map(|(x, y)| x + y).collect(),
                        Saved::None,
                    )),
                    OpKind::Mul => Ok((
                        a.shape.clone(),
                        pairs.map(|(x, y)| x * y).collect(),
                        Saved::None,
                    )),
                    _ => {
                        if let Some(t) = b.value.iter().find(|&&t| t != 0.0 && t != 1.0) {
                            return Err(shape_err(kind, format!("target {t} outside {{0,1}}")));
                        }
                        let total: f64 = pairs.map(|(&x, &t)| bce_with_logit(x, t)).sum();
                        Ok((vec![1], vec![total / a.value.len() as f64], Saved::None))
                    }
                }
            }
            OpKind::Scale(f) => {
                let x = node(0);
                Ok((
                    x.shape.clone(),
                    x.value.iter().map(|v| v * f).collect(),
                    Saved::None,
                ))
            }
            OpKind::Sum | OpKind::Mean => {
                let x = node(0);
                let s: f64 = x.value.iter().sum();
                let v = if matches!(kind, OpKind::Mean) {
                    s / x.value.len() as f64
                } else {
                    s
                };
                Ok((vec![1], vec![v], Saved::None))
            }
        }
    }

    /// Back-propagates from a scalar node; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, NumericError> {
        let Some(root) = self.nodes.get(loss.0) else {
            return Err(NumericError::Shape(format!(
                "backward: {loss:?} is not on this tape"
            )));
        };
        if root.value.len() != 1 {
            return Err(NumericError::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if root.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut nodes = self.nodes;
        for idx in (0..=loss.0).rev() {
            let Recorded::Op { .. } = nodes[idx].recorded else {
                continue;
            };
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let recorded = std::mem::replace(&mut nodes[idx].recorded, Recorded::Constant);
            let Recorded::Op {
                kind,
                inputs,
                saved,
            } = recorded
            else {
                unreachable!()
            };
            backprop(
                &nodes,
                &nodes[idx],
                &kind,
                &inputs,
                saved,
                &gout,
                &mut grads,
            );
            // Intermediate values are no longer needed once their gradient has been used.
            nodes[idx].value = Vec::new();
        }
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.recorded, Recorded::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], var: Var, delta: Vec<f64>) {
    if !nodes[var.0].needs_grad {
        return;
    }
    match &mut grads[var.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop(
    nodes: &[Node],
    out: &Node,
    kind: &OpKind,
    inputs: &[Var],
    saved: Saved,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let input = |i: usize| &nodes[inputs[i].0];
    let wants = |i: usize| nodes[inputs[i].0].needs_grad;
    match *kind {
        OpKind::Conv2d { .. } => {
            let Saved::Conv { geom, cols } = saved else {
                unreachable!()
            };
            let (rows, plen, cout) = (geom.out_rows(), geom.patch_len(), geom.out_c);
            if wants(1) {
                let mut gw = vec![0.0; plen * cout];
                gemm(
                    plen,
                    rows,
                    cout,
                    MatRef::transposed(&cols, plen),
                    MatRef::rows(gout, cout),
                    0.0,
                    &mut gw,
                );
                accumulate(grads, nodes, inputs[1], gw);
            }
            if wants(0) {
                let mut gcols = cols;
                gemm(
                    rows,
                    cout,
                    plen,
                    MatRef::rows(gout, cout),
                    MatRef::transposed(&input(1).value, cout),
                    0.0,
                    &mut gcols,
                );
                let mut gx = vec![0.0; input(0).value.len()];
                geom.col2im_add(&gcols, &mut gx);
                accumulate(grads, nodes, inputs[0], gx);
            }
        }
        OpKind::MaxPool2 => {
            let Saved::PoolArgmax(arg) = saved else {
                unreachable!()
            };
            let mut gx = vec![0.0; input(0).value.len()];
            arg.iter().zip(gout).for_each(|(&i, g)| gx[i] += g);
            accumulate(grads, nodes, inputs[0], gx);
        }
        OpKind::GlobalAvgPool => {
            let shape = &input(0).shape;
            let (hw, c) = (shape[1] * shape[2], shape[3]);
            let mut gx = vec![0.0; input(0).value.len()];
            for (b, g) in gout.chunks(c).enumerate() {
                for p in 0..hw {
                    let dst = &mut gx[(b * hw + p) * c..(b * hw + p + 1) * c];
                    dst.iter_mut()
                        .zip(g)
                        .for_each(|(d, gv)| *d = gv / hw as f64);
                }
            }
            accumulate(grads, nodes, inputs[0], gx);
        }
        OpKind::MatMul | OpKind::MatMulTransB => {
            let (a, b) = (input(0), input(1));
            let trans = matches!(kind, OpKind::MatMulTransB);
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = out.shape[1];
            if wants(0) {
                // dA = dC·Bᵀ, with B stored k×n (plain) or n×k (transposed)
                let bref = if trans {
                    MatRef::rows(&b.value, k)
                } else {
                    MatRef::transposed(&b.value, n)
                };
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, MatRef::rows(gout, n), bref, 0.0, &mut ga);
                accumulate(grads, nodes, inputs[0], ga);
            }
            if wants(1) {
                let mut gb = vec![0.0; k * n];
                if trans {
                    gemm(
                        n,
                        m,
                        k,
                        MatRef::transposed(gout, n),
                        MatRef::rows(&a.value, k),
                        0.0,
                        &mut gb,
                    );
                } else {
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(&a.value, k),
                        MatRef::rows(gout, n),
                        0.0,
                        &mut gb,
                    );
                }
                accumulate(grads, nodes, inputs[1], gb);
            }
        }
        OpKind::BiasAdd => {
            if wants(1) {
                let len = input(1).value.len();
                let mut gb = vec![0.0; len];
                gout.chunks(len)
                    .for_each(|row| gb.iter_mut().zip(row).for_each(|(a, g)| *a += g));
                accumulate(grads, nodes, inputs[1], gb);
            }
            accumulate(grads, nodes, inputs[0], gout.to_vec());
        }
        OpKind::Relu => {
            let gx = input(0)
                .value
                .iter()
                .zip(gout)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, inputs[0], gx);
        }
        OpKind::Sigmoid => {
            let gx = out
                .value
                .iter()
                .zip(gout)
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect();
            accumulate(grads, nodes, inputs[0], gx);
        }
        OpKind::Add => {
            accumulate(grads, nodes, inputs[0], gout.to_vec());
            accumulate(grads, nodes, inputs[1], gout.to_vec());
        }
        OpKind::Mul => {
            let (a, b) = (input(0), input(1));
            if wants(0) {
                accumulate(
                    grads,
                    nodes,
                    inputs[0],
                    b.value.iter().zip(gout).map(|(y, g)| y * g).collect(),
                );
            }
            if wants(1) {
                accumulate(
                    grads,
                    nodes,
                    inputs[1],
                    a.value.iter().zip(gout).map(|(x, g)| x * g).collect(),
                );
            }
        }
        OpKind::Scale(f) => {
            accumulate(
                grads,
                nodes,
                inputs[0],
                gout.iter().map(|g| g * f).collect(),
            );
        }
        OpKind::Sum | OpKind::Mean => {
            let len = input(0).value.len();
            let g = if matches!(kind, OpKind::Mean) {
                gout[0] / len as f64
            } else {
                gout[0]
            };
            accumulate(grads, nodes, inputs[0], vec![g; len]);
        }
        OpKind::BceWithLogits => {
            let (x, t) = (input(0), input(1));
            let scale = gout[0] / x.value.len() as f64;
            let gx = x
                .value
                .iter()
                .zip(&t.value)
                .map(|(&l, &y)| (sigmoid(l) - y) * scale)
                .collect();
            accumulate(grads, nodes, inputs[0], gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap().with_grad()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn branch_signature_tracks_relu_sides_and_pool_winners() {
        let sig = |vals: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(&param(vec![1, 2, 2, 1], vals));
            let r = tape.relu(x).unwrap();
            tape.max_pool2(r).unwrap();
            tape.branch_signature()
        };
        assert_eq!(sig(vec![-1.0, 2.0, 0.5, 3.0]), vec![0, 1, 1, 1, 3]);
        assert_eq!(
            sig(vec![-1.0, 2.0, 0.5, 3.1]),
            sig(vec![-1.0, 2.0, 0.5, 3.0])
        );
        assert_ne!(
            sig(vec![1.0, 2.0, 0.5, 3.0]),
            sig(vec![-1.0, 2.0, 0.5, 3.0])
        );
    }

    #[test]
    fn gap_on_single_pixel_is_identity() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![1, 1, 1, 4], vec![1.0, -2.0, 3.5, 0.0])
            .unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 4]);
        assert_eq!(tape.value(y), &[1.0, -2.0, 3.5, 0.0]);
    }

    #[test]
    fn conv_of_ones_counts_window_overlap() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 5, 5, 1], vec![1.0; 25]).unwrap();
        let w = tape.constant(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let y = tape.conv2d(x, w, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 5, 1]);
        // sliding-window oracle: count in-bounds taps per output pixel
        for oy in 0..5i32 {
            for ox in 0..5i32 {
                let mut count = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if (0..5).contains(&(oy + dy)) && (0..5).contains(&(ox + dx)) {
                            count += 1.0;
                        }
                    }
                }
                assert_eq!(tape.value(y)[(oy * 5 + ox) as usize], count);
            }
        }
        assert_eq!(tape.value(y)[12], 9.0);
        assert_eq!(tape.value(y)[0], 4.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = param(vec![4], vec![0.3, -1.0, 2.0, 5.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_gradient() {
        let x = param(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = param(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.relu(xv).unwrap();
        assert!(matches!(tape.backward(y), Err(NumericError::NotScalar(_))));
    }

    #[test]
    fn constants_record_nothing_for_backward() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 4, 4, 1], vec![0.5; 16]).unwrap();
        let w = tape.constant(vec![3, 3, 1, 2], vec![0.1; 18]).unwrap();
        let y = tape.conv2d(x, w, 1).unwrap();
        assert!(!tape.requires_grad(y));
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape::new();
        let l = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let t = tape.constant(vec![2], vec![1.0, 0.5]).unwrap();
        assert!(tape.bce_with_logits(l, t).is_err());
    }
}
