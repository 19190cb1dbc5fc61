use super::kernels::{self, Conv2dGeom, PoolGeom};
use super::{Elem, Tensor};
use crate::error::{Error, Result};
use crate::simplex;

/// Position of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Handle to a value recorded on a [`Tape`].
pub type Var = NodeId;

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_MOMENTUM: Elem = 0.9;
pub const BN_EPS: Elem = 1e-5;

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Elem>,
    pub var: Vec<Elem>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics, optionally folding them into `running`.
    Train { running: Option<&'a mut RunningStats> },
    /// Normalize with stored running statistics.
    Eval(&'a RunningStats),
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: Conv2dGeom,
    },
    AvgPool2d {
        input: Var,
        geom: PoolGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    BatchNorm2d {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<Elem>,
        inv_std: Vec<Elem>,
        batch_stats: bool,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: Elem,
    },
    Sum {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<Elem>,
    },
    RowSoftmax {
        input: Var,
        tau: f64,
    },
    RowSparsemax {
        input: Var,
        scale: f64,
    },
    Mix {
        inputs: Vec<Var>,
        weights: Var,
        row: usize,
        cols: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Linear { .. } => "linear",
            Op::Relu { .. } => "relu",
            Op::BatchNorm2d { .. } => "batch_norm2d",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::RowSoftmax { .. } => "row_softmax",
            Op::RowSparsemax { .. } => "row_sparsemax",
            Op::Mix { .. } => "mix",
        }
    }
}

/// Names of every differentiable operation a tape can record.
pub const OP_KINDS: [&str; 14] = [
    "conv2d",
    "avg_pool2d",
    "linear",
    "relu",
    "batch_norm2d",
    "add",
    "mul",
    "scale",
    "sum",
    "global_avg_pool",
    "softmax_cross_entropy",
    "row_softmax",
    "row_sparsemax",
    "mix",
];

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    simplex_grad_nodes: usize,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<Elem>>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Elem]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of tape nodes the backward sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Adds the gradient recorded for `t.tape_id()` into `t`'s grad buffer.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<()> {
        match t.tape_id().and_then(|id| self.get(id)) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn add_into(acc: &mut Option<Vec<Elem>>, delta: &[Elem]) {
    match acc {
        Some(a) => a.iter_mut().zip(delta).for_each(|(x, d)| *x += d),
        None => *acc = Some(delta.to_vec()),
    }
}

fn add_owned(acc: &mut Option<Vec<Elem>>, delta: Vec<Elem>) {
    match acc {
        Some(a) => a.iter_mut().zip(&delta).for_each(|(x, d)| *x += d),
        None => *acc = Some(delta),
    }
}

fn to_f64(v: &[Elem]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
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

    /// Simplex-normalization nodes that carry gradient back to their input.
    pub fn simplex_grad_nodes(&self) -> usize {
        self.simplex_grad_nodes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = NodeId(self.nodes.len());
        let mut value = value;
        value.grad = None;
        value.requires_grad = requires_grad;
        value.tape_id = Some(id);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a copy of `t` as a leaf and links `t` to it through its
    /// `tape_id`. The leaf requires grad iff `t` does.
    pub fn param(&mut self, t: &mut Tensor) -> Var {
        let rg = t.requires_grad();
        let v = self.push(Tensor::from_parts(t.shape.clone(), t.data.clone()), Op::Leaf, rg);
        t.set_tape_id(Some(v));
        v
    }

    pub fn zeros_like(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        self.constant(Tensor::zeros(&shape))
    }

    fn nchw(&self, x: Var, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::dim(op, "input rank", format!("expected NCHW, got {s:?}"))),
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(input, "conv2d")?;
        let [k, wc, kh, kw] = match *self.shape(weight) {
            [a, b, c, d] => [a, b, c, d],
            ref s => {
                return Err(Error::dim("conv2d", "weight rank", format!("expected KCHW, got {s:?}")))
            }
        };
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                "input axis 1 vs weight axis 1",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::param("stride", "must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim(
                "conv2d",
                "axes 2,3",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        let geom = Conv2dGeom {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_channels: k,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            &geom,
            n,
        );
        let shape = vec![n, k, geom.out_h(), geom.out_w()];
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                weight,
                geom,
            },
            rg,
        ))
    }

    /// Average pooling; the divisor counts only cells inside the input.
    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(input, "avg_pool2d")?;
        if kernel == 0 || stride == 0 {
            return Err(Error::param("kernel/stride", "must be positive"));
        }
        if h + 2 * padding < kernel || w + 2 * padding < kernel || padding >= kernel {
            return Err(Error::dim(
                "avg_pool2d",
                "axes 2,3",
                format!("window {kernel} with padding {padding} does not fit {h}x{w}"),
            ));
        }
        let geom = PoolGeom {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            padding,
        };
        let out = kernels::avg_pool_forward(self.value(input).data(), &geom, n);
        let shape = vec![n, c, geom.out_h(), geom.out_w()];
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPool2d { input, geom }, rg))
    }

    /// `x·wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, fin) = match *self.shape(input) {
            [n, f] => (n, f),
            ref s => return Err(Error::dim("linear", "input rank", format!("expected [N, in], got {s:?}"))),
        };
        let (fout, win) = match *self.shape(weight) {
            [o, i] => (o, i),
            ref s => return Err(Error::dim("linear", "weight rank", format!("expected [out, in], got {s:?}"))),
        };
        if win != fin {
            return Err(Error::dim(
                "linear",
                "input axis 1 vs weight axis 1",
                format!("{fin} features in, weight expects {win}"),
            ));
        }
        let mut out = vec![0.0; n * fout];
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::dim("linear", "bias axis 0", format!("expected [{fout}], got {:?}", self.shape(b))));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm(
            n,
            fin,
            fout,
            1.0,
            self.value(input).data(),
            (fin as isize, 1),
            self.value(weight).data(),
            (1, fin as isize),
            1.0,
            &mut out,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![n, fout], out),
            Op::Linear { input, weight, bias },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<Elem> = x.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.any_grad(&[input]);
        self.push(t, Op::Relu { input }, rg)
    }

    pub fn batch_norm2d(&mut self, input: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<Var> {
        let [n, c, h, w] = self.nchw(input, "batch_norm2d")?;
        for (p, name) in [(gamma, "gamma axis 0"), (beta, "beta axis 0")] {
            if self.shape(p) != [c] {
                return Err(Error::dim("batch_norm2d", name, format!("expected [{c}], got {:?}", self.shape(p))));
            }
        }
        let hw = h * w;
        let count = (n * hw) as Elem;
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match &mode {
            BatchNormMode::Train { .. } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        mean[ci] += plane.iter().sum::<Elem>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        var[ci] += plane.iter().map(|v| (v - mean[ci]) * (v - mean[ci])).sum::<Elem>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
            BatchNormMode::Eval(stats) => (stats.mean.clone(), stats.var.clone(), false),
        };
        let inv_std: Vec<Elem> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    let xh = (x[i] - mean[ci]) * inv_std[ci];
                    normalized[i] = xh;
                    out[i] = g[ci] * xh + b[ci];
                }
            }
        }
        if let BatchNormMode::Train { running: Some(stats) } = mode {
            let unbias = if n * hw > 1 { count / (count - 1.0) } else { 1.0 };
            for ci in 0..c {
                stats.mean[ci] = BN_MOMENTUM * stats.mean[ci] + (1.0 - BN_MOMENTUM) * mean[ci];
                stats.var[ci] = BN_MOMENTUM * stats.var[ci] + (1.0 - BN_MOMENTUM) * var[ci] * unbias;
            }
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                "all axes",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape(lhs, rhs, "add")?;
        let a = self.value(lhs);
        let out: Vec<Elem> = a.data().iter().zip(self.value(rhs).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), out);
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(t, Op::Add { lhs, rhs }, rg))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape(lhs, rhs, "mul")?;
        let a = self.value(lhs);
        let out: Vec<Elem> = a.data().iter().zip(self.value(rhs).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), out);
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(t, Op::Mul { lhs, rhs }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: Elem) -> Var {
        let a = self.value(input);
        let out: Vec<Elem> = a.data().iter().map(|x| x * factor).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), out);
        let rg = self.any_grad(&[input]);
        self.push(t, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: Elem = self.value(input).data().iter().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw(input, "global_avg_pool")?;
        let hw = h * w;
        let out: Vec<Elem> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<Elem>() / hw as Elem)
            .collect();
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool { input }, rg))
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            ref s => {
                return Err(Error::dim("softmax_cross_entropy", "logits rank", format!("expected [N, K], got {s:?}")))
            }
        };
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                "logits axis 0 vs labels",
                format!("{n} rows, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!("label {bad} outside [0, {k})")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, (row, p)) in z.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let m = row.iter().copied().fold(Elem::NEG_INFINITY, Elem::max);
            let mut s = 0.0;
            for (pj, &zj) in p.iter_mut().zip(row) {
                *pj = (zj - m).exp();
                s += *pj;
            }
            p.iter_mut().for_each(|v| *v /= s);
            loss += -(row[labels[i]] - m - s.ln());
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as Elem),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn rows(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, k] => Ok((r, k)),
            ref s => Err(Error::dim(op, "input rank", format!("expected [rows, K], got {s:?}"))),
        }
    }

    /// Row-wise temperature softmax of a `[rows, K]` matrix.
    pub fn row_softmax(&mut self, input: Var, tau: f64) -> Result<Var> {
        let (r, k) = self.rows(input, "row_softmax")?;
        let x = to_f64(self.value(input).data());
        let mut out = Vec::with_capacity(r * k);
        for row in x.chunks(k) {
            out.extend(simplex::softmax_tau(row, tau)?.into_iter().map(|p| p as Elem));
        }
        let rg = self.any_grad(&[input]);
        if rg {
            self.simplex_grad_nodes += 1;
        }
        Ok(self.push(Tensor::from_parts(vec![r, k], out), Op::RowSoftmax { input, tau }, rg))
    }

    /// Row-wise `sparsemax(scale · row)` of a `[rows, K]` matrix.
    pub fn row_sparsemax(&mut self, input: Var, scale: f64) -> Result<Var> {
        let (r, k) = self.rows(input, "row_sparsemax")?;
        let x = to_f64(self.value(input).data());
        let mut out = Vec::with_capacity(r * k);
        for row in x.chunks(k) {
            let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
            out.extend(simplex::sparsemax(&scaled)?.into_iter().map(|p| p as Elem));
        }
        let rg = self.any_grad(&[input]);
        if rg {
            self.simplex_grad_nodes += 1;
        }
        Ok(self.push(Tensor::from_parts(vec![r, k], out), Op::RowSparsemax { input, scale }, rg))
    }

    /// `Σ_k weights[row, cols[k]] · inputs[k]` over same-shaped inputs.
    pub fn mix(&mut self, inputs: &[Var], weights: Var, row: usize, cols: &[usize]) -> Result<Var> {
        let (r, k) = self.rows(weights, "mix")?;
        if inputs.is_empty() || inputs.len() != cols.len() {
            return Err(Error::dim("mix", "inputs vs cols", format!("{} inputs, {} columns", inputs.len(), cols.len())));
        }
        if row >= r || cols.iter().any(|&c| c >= k) {
            return Err(Error::dim("mix", "weights", format!("index out of [{r}, {k}]")));
        }
        for &x in &inputs[1..] {
            self.same_shape(inputs[0], x, "mix")?;
        }
        let wd = self.value(weights).data();
        let mut out = vec![0.0; self.value(inputs[0]).numel()];
        for (&x, &c) in inputs.iter().zip(cols) {
            let p = wd[row * k + c];
            out.iter_mut()
                .zip(self.value(x).data())
                .for_each(|(o, v)| *o += p * v);
        }
        let shape = self.shape(inputs[0]).to_vec();
        let mut deps = inputs.to_vec();
        deps.push(weights);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Mix {
                inputs: inputs.to_vec(),
                weights,
                row,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<Elem>>> = vec![None; self.nodes.len()];
        let mut leaves: Vec<Option<Vec<Elem>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            if let Op::Leaf = node.op {
                leaves[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { leaves, visited })
    }

    fn backward_node(&self, node: &Node, g: &[Elem], grads: &mut [Option<Vec<Elem>>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                let n = self.shape(*input)[0];
                if rg(*input) {
                    let dx = kernels::conv2d_backward_input(g, val(*weight), geom, n);
                    add_owned(&mut grads[input.0], dx);
                }
                if rg(*weight) {
                    let dw = kernels::conv2d_backward_weight(g, val(*input), geom, n);
                    add_owned(&mut grads[weight.0], dw);
                }
            }
            Op::AvgPool2d { input, geom } => {
                if rg(*input) {
                    let n = self.shape(*input)[0];
                    add_owned(&mut grads[input.0], kernels::avg_pool_backward(g, geom, n));
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, fin) = (self.shape(*input)[0], self.shape(*input)[1]);
                let fout = self.shape(*weight)[0];
                if rg(*input) {
                    let mut dx = vec![0.0; n * fin];
                    kernels::gemm(n, fout, fin, 1.0, g, (fout as isize, 1), val(*weight), (fin as isize, 1), 0.0, &mut dx);
                    add_owned(&mut grads[input.0], dx);
                }
                if rg(*weight) {
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(fout, n, fin, 1.0, g, (1, fout as isize), val(*input), (fin as isize, 1), 0.0, &mut dw);
                    add_owned(&mut grads[weight.0], dw);
                }
                if let Some(b) = bias.filter(|b| rg(*b)) {
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Relu { input } => {
                if rg(*input) {
                    let dx: Vec<Elem> = val(*input)
                        .iter()
                        .zip(g)
                        .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                        .collect();
                    add_owned(&mut grads[input.0], dx);
                }
            }
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = self.nchw(*input, "batch_norm2d")?;
                let hw = h * w;
                let count = (n * hw) as Elem;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for i in off..off + hw {
                            dgamma[ci] += g[i] * normalized[i];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                if rg(*input) {
                    let gm = val(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            let scale = gm[ci] * inv_std[ci];
                            for i in off..off + hw {
                                dx[i] = if *batch_stats {
                                    scale / count * (count * g[i] - dbeta[ci] - normalized[i] * dgamma[ci])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    add_owned(&mut grads[input.0], dx);
                }
                if rg(*gamma) {
                    add_owned(&mut grads[gamma.0], dgamma);
                }
                if rg(*beta) {
                    add_owned(&mut grads[beta.0], dbeta);
                }
            }
            Op::Add { lhs, rhs } => {
                if rg(*lhs) {
                    add_into(&mut grads[lhs.0], g);
                }
                if rg(*rhs) {
                    add_into(&mut grads[rhs.0], g);
                }
            }
            Op::Mul { lhs, rhs } => {
                if rg(*lhs) {
                    let d: Vec<Elem> = g.iter().zip(val(*rhs)).map(|(a, b)| a * b).collect();
                    add_owned(&mut grads[lhs.0], d);
                }
                if rg(*rhs) {
                    let d: Vec<Elem> = g.iter().zip(val(*lhs)).map(|(a, b)| a * b).collect();
                    add_owned(&mut grads[rhs.0], d);
                }
            }
            Op::Scale { input, factor } => {
                if rg(*input) {
                    let d: Vec<Elem> = g.iter().map(|v| v * factor).collect();
                    add_owned(&mut grads[input.0], d);
                }
            }
            Op::Sum { input } => {
                if rg(*input) {
                    let n = self.nodes[input.0].value.numel();
                    add_owned(&mut grads[input.0], vec![g[0]; n]);
                }
            }
            Op::GlobalAvgPool { input } => {
                if rg(*input) {
                    let s = self.shape(*input);
                    let hw = s[2] * s[3];
                    let mut dx = Vec::with_capacity(hw * g.len());
                    for &d in g {
                        dx.extend(std::iter::repeat_n(d / hw as Elem, hw));
                    }
                    add_owned(&mut grads[input.0], dx);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if rg(*logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as Elem;
                    let mut dz: Vec<Elem> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dz[i * k + l] -= scale;
                    }
                    add_owned(&mut grads[logits.0], dz);
                }
            }
            Op::RowSoftmax { input, tau } => {
                if rg(*input) {
                    let k = self.shape(*input)[1];
                    let p = node.value.data();
                    let mut dx = vec![0.0; p.len()];
                    for ((pr, gr), dr) in p.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                        let dot: Elem = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dr[j] = pr[j] * (gr[j] - dot) / *tau as Elem;
                        }
                    }
                    add_owned(&mut grads[input.0], dx);
                }
            }
            Op::RowSparsemax { input, scale } => {
                if rg(*input) {
                    let k = self.shape(*input)[1];
                    let x = to_f64(val(*input));
                    let gv = to_f64(g);
                    let mut dx = Vec::with_capacity(x.len());
                    for (xr, gr) in x.chunks(k).zip(gv.chunks(k)) {
                        let scaled: Vec<f64> = xr.iter().map(|v| v * scale).collect();
                        let jv = simplex::sparsemax_jacobian_vec(&scaled, gr)?;
                        dx.extend(jv.into_iter().map(|v| (v * scale) as Elem));
                    }
                    add_owned(&mut grads[input.0], dx);
                }
            }
            Op::Mix {
                inputs,
                weights,
                row,
                cols,
            } => {
                let k = self.shape(*weights)[1];
                let wd = val(*weights);
                let mut dw = rg(*weights).then(|| vec![0.0; wd.len()]);
                for (&x, &c) in inputs.iter().zip(cols) {
                    let p = wd[row * k + c];
                    if rg(x) {
                        let d: Vec<Elem> = g.iter().map(|v| v * p).collect();
                        add_owned(&mut grads[x.0], d);
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[row * k + c] += val(x).iter().zip(g).map(|(a, b)| a * b).sum::<Elem>();
                    }
                }
                if let Some(dw) = dw {
                    add_owned(&mut grads[weights.0], dw);
                }
            }
        }
        Ok(())
    }

    /// Op names in recording order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }
}
