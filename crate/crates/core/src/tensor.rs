//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to tensors it owns; calling
//! [`Tape::backward`] on a scalar loss replays the record in reverse and
//! accumulates gradients into each tensor that requires them. The op set is
//! exactly what the rest of the crate needs: elementwise arithmetic, matmul,
//! conv2d, average pooling, the classifier nonlinearities, and the two attack
//! primitives (bilinear warping and the flow smoothness penalty).
//!
//! Everything is f64. Broadcasting is limited to scalar-vs-tensor.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// An n-dimensional array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    Abs(Var),
    Sqrt(Var),
    Tanh(Var),
    Relu(Var),
    Max(Var, Var),
    MaxScalar(Var, f64),
    Sum(Var),
    Reshape(Var),
    Matmul(Var, Var),
    BiasRow(Var, Var),
    BiasChan(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        input: Var,
        k: usize,
        stride: usize,
        same_size: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Margin {
        logits: Var,
        class: usize,
        kappa: f64,
        untargeted: bool,
    },
    FlowTv {
        flow: Var,
        eps: f64,
        su: f64,
        sv: f64,
    },
    Warp {
        image: Var,
        flow: Var,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    /// True when a gradient must flow through this node (some ancestor leaf
    /// has requires_grad). Ops whose inputs are all grad-free are skipped in
    /// backward, which is what makes frozen-weight attack objectives cheap.
    needs: bool,
}

/// Ordered record of primitive operations; consumed by one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = requires_grad;
        Ok(self.leaf(t))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { tensor, op, needs });
        Var(id)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
            needs,
        )
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Scalar convenience accessor; panics if the tensor is not length-1.
    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.data(v).len(), 1, "scalar_value on non-scalar tensor");
        self.data(v)[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn check_ew(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na = self.data(a).len();
        let nb = self.data(b).len();
        if na == nb && sa == sb {
            Ok(sa.to_vec())
        } else if nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn ew_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.check_ew(name, a, b)?;
        let da = self.data(a);
        let db = self.data(b);
        let data = match (da.len(), db.len()) {
            (x, y) if x == y => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (_, 1) => da.iter().map(|&x| f(x, db[0])).collect(),
            (1, _) => db.iter().map(|&y| f(da[0], y)).collect(),
            _ => unreachable!(),
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary("max_elem", a, b, f64::max, Op::Max(a, b))
    }

    fn ew_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.out(shape, data, op, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.ew_unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.ew_unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.ew_unary(a, |x| x.max(c), Op::MaxScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.ew_unary(a, |x| -x, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.ew_unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.ew_unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.ew_unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.ew_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.out(vec![1], vec![s], Op::Sum(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        Ok(self.out(shape, data, Op::Reshape(a), needs))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm_nn(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![m, n], data, Op::Matmul(a, b), needs))
    }

    /// `[N,D] + [D]` row-broadcast bias.
    pub fn bias_add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add_row",
                left: sx,
                right: sb,
            });
        }
        let d = sx[1];
        let bd = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&bd) {
                *v += bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.out(sx, data, Op::BiasRow(x, b), needs))
    }

    /// `[N,C,H,W] + [C]` channel-broadcast bias.
    pub fn bias_add_chan(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add_chan",
                left: sx,
                right: sb,
            });
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let bd = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for sample in data.chunks_mut(c * hw) {
            for (ci, plane) in sample.chunks_mut(hw).enumerate() {
                let bv = bd[ci];
                for v in plane {
                    *v += bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.out(sx, data, Op::BiasChan(x, b), needs))
    }

    // ── structured ops ──────────────────────────────────────────────

    /// 2-D cross-correlation: input `[N,C,H,W]`, kernel `[F,C,kh,kw]`,
    /// zero padding, output `[N,F,H',W']`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: si,
                right: sk,
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        let oh = conv_out_dim(h, kh, stride, padding)?;
        let ow = conv_out_dim(w, kw, stride, padding)?;
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let data = conv2d_forward(self.data(input), self.data(kernel), &geom);
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.out(
            vec![n, f, oh, ow],
            data,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Average pooling over `[N,C,H,W]`. In `same_size` mode (stride 1, odd k)
    /// the input is edge-replicated so output dims equal input dims; this is
    /// the mean-blur building block. Otherwise the window must tile exactly.
    pub fn avgpool2d(&mut self, input: Var, k: usize, stride: usize, same_size: bool) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if si.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "avgpool2d",
                left: si,
                right: vec![],
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        if same_size {
            if stride != 1 || k % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "same-size avgpool requires stride 1 and odd window, got k={k} stride={stride}"
                )));
            }
        } else if k > h || k > w {
            return Err(Error::InvalidArgument(format!(
                "avgpool window {k} larger than input {h}x{w}"
            )));
        }
        let (oh, ow) = if same_size {
            (h, w)
        } else {
            (conv_out_dim(h, k, stride, 0)?, conv_out_dim(w, k, stride, 0)?)
        };
        let data = avgpool_forward(self.data(input), n, c, h, w, k, stride, same_size, oh, ow);
        let needs = self.needs(input);
        Ok(self.out(
            vec![n, c, oh, ow],
            data,
            Op::AvgPool {
                input,
                k,
                stride,
                same_size,
            },
            needs,
        ))
    }

    /// Inverted dropout: zeroes units with probability `p` and scales the
    /// survivors by 1/(1-p). The mask is drawn here and saved for backward.
    pub fn dropout(&mut self, input: Var, p: f64, rng: &mut impl rand::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.data(input).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        Ok(self.out(shape, data, Op::Dropout { input, mask }, needs))
    }

    /// Row-wise softmax over `[N,C]` (or a single `[C]` vector).
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let (rows, cols) = self.as_rows("softmax", logits)?;
        let src = self.data(logits);
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            softmax_row(row, out);
        }
        let shape = self.shape(logits).to_vec();
        let needs = self.needs(logits);
        Ok(self.out(shape, data, Op::Softmax(logits), needs))
    }

    /// Mean cross-entropy of `[N,C]` logits against integer labels, computed
    /// as log-sum-exp(row) - row[label] per example.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.as_rows("cross_entropy", logits)?;
        if labels.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} labels for {} logit rows",
                labels.len(),
                rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {bad} out of range for {cols} classes"
            )));
        }
        let src = self.data(logits);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            total += log_sum_exp(row) - row[y];
        }
        total /= rows as f64;
        let needs = self.needs(logits);
        Ok(self.out(
            vec![1],
            vec![total],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Margin loss over a logit vector.
    ///
    /// Targeted: max(max_{i != t} g_i - g_t, kappa). Untargeted (class = the
    /// true label y): max(g_y - max_{i != y} g_i, kappa). The gradient flows
    /// through the selected max branch only.
    pub fn margin_loss(&mut self, logits: Var, class: usize, kappa: f64, untargeted: bool) -> Result<Var> {
        let n = self.data(logits).len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "margin loss needs at least 2 logits, got {n}"
            )));
        }
        if class >= n {
            return Err(Error::InvalidArgument(format!(
                "margin loss: class {class} out of range for {n} logits"
            )));
        }
        let g = self.data(logits);
        let (best, _) = argmax_excluding(g, class);
        let margin = if untargeted {
            g[class] - g[best]
        } else {
            g[best] - g[class]
        };
        let value = margin.max(kappa);
        let needs = self.needs(logits);
        Ok(self.out(
            vec![1],
            vec![value],
            Op::Margin {
                logits,
                class,
                kappa,
                untargeted,
            },
            needs,
        ))
    }

    /// Total-variation smoothness of a `[2,H,W]` flow tensor: for every
    /// ordered pair of 4-connected neighbors (p,q),
    /// sqrt((du_p-du_q)^2 + (dv_p-dv_q)^2 + eps) is accumulated.
    pub fn flow_tv_loss(&mut self, flow: Var, eps: f64) -> Result<Var> {
        self.flow_tv_loss_scaled(flow, eps, 1.0, 1.0)
    }

    /// Flow smoothness with per-axis displacement scaling: differences are
    /// measured as (su * ddu, sv * ddv) before the root. The attack objective
    /// uses this to express displacements on the normalized sampling grid.
    pub fn flow_tv_loss_scaled(&mut self, flow: Var, eps: f64, su: f64, sv: f64) -> Result<Var> {
        let s = self.shape(flow).to_vec();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::ShapeMismatch {
                op: "flow_tv_loss",
                left: s,
                right: vec![2, 0, 0],
            });
        }
        let (h, w) = (s[1], s[2]);
        let d = self.data(flow);
        if !d.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        let (du, dv) = d.split_at(h * w);
        let mut total = 0.0;
        for_each_directed_pair(h, w, |p, q| {
            let tu = su * (du[p] - du[q]);
            let tv = sv * (dv[p] - dv[q]);
            total += (tu * tu + tv * tv + eps).sqrt();
        });
        let needs = self.needs(flow);
        Ok(self.out(vec![1], vec![total], Op::FlowTv { flow, eps, su, sv }, needs))
    }

    /// Bilinear warp of an image `[C,H,W]` by a flow `[2,H,W]` (du along
    /// rows, dv along columns): output pixel (u,v) samples the input at
    /// (u + du, v + dv), clamped to the image rectangle, as the convex
    /// combination of its four integer neighbors.
    pub fn bilinear_warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let si = self.shape(image).to_vec();
        let sf = self.shape(flow).to_vec();
        if si.len() != 3 || sf.len() != 3 || sf[0] != 2 || si[1] != sf[1] || si[2] != sf[2] {
            return Err(Error::ShapeMismatch {
                op: "bilinear_warp",
                left: si,
                right: sf,
            });
        }
        if !self.data(flow).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (du, dv) = self.data(flow).split_at(h * w);
        let data = warp_forward(self.data(image), c, h, w, du, dv);
        let needs = self.needs(image) || self.needs(flow);
        Ok(self.out(vec![c, h, w], data, Op::Warp { image, flow }, needs))
    }

    fn as_rows(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [c] => Ok((1, *c)),
            [n, c] => Ok((*n, *c)),
            s => Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates `grad` on every tensor with
    /// `requires_grad` and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.data(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        for node in self.nodes.iter_mut() {
            if node.needs {
                node.tensor.grad = Some(vec![0.0; node.tensor.data.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].tensor.grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let seed = match self.nodes[i].tensor.grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(i, &op, &seed);
            self.nodes[i].tensor.grad = Some(seed);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].needs {
            return;
        }
        let g = self.nodes[v.0].tensor.grad.as_mut().expect("grad allocated");
        for (i, gv) in g.iter_mut().enumerate() {
            *gv += contrib(i);
        }
    }

    fn acc_slice(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].needs {
            return;
        }
        let g = self.nodes[v.0].tensor.grad.as_mut().expect("grad allocated");
        debug_assert_eq!(g.len(), contrib.len());
        for (gv, &c) in g.iter_mut().zip(contrib) {
            *gv += c;
        }
    }

    /// Accumulate into `v`'s grad a seed that may need scalar-broadcast
    /// reduction (when `v` is the length-1 side of an elementwise op).
    fn acc_bcast(&mut self, v: Var, partial: impl Fn(usize) -> f64, out_len: usize) {
        if !self.nodes[v.0].needs {
            return;
        }
        let vlen = self.nodes[v.0].tensor.data.len();
        let g = self.nodes[v.0].tensor.grad.as_mut().expect("grad allocated");
        if vlen == out_len {
            for (i, gv) in g.iter_mut().enumerate() {
                *gv += partial(i);
            }
        } else {
            debug_assert_eq!(vlen, 1);
            let mut s = 0.0;
            for i in 0..out_len {
                s += partial(i);
            }
            g[0] += s;
        }
    }

    fn in_data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    /// Value of operand `v` at flat output position `i` under scalar broadcast.
    fn bval(&self, v: Var, i: usize) -> f64 {
        let d = self.in_data(v);
        if d.len() == 1 {
            d[0]
        } else {
            d[i]
        }
    }

    fn step_backward(&mut self, node: usize, op: &Op, seed: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_bcast(a, |i| seed[i], seed.len());
                self.acc_bcast(b, |i| seed[i], seed.len());
            }
            Op::Sub(a, b) => {
                self.acc_bcast(a, |i| seed[i], seed.len());
                self.acc_bcast(b, |i| -seed[i], seed.len());
            }
            Op::Mul(a, b) => {
                let bb: Vec<f64> = (0..seed.len()).map(|i| self.bval(b, i)).collect();
                let aa: Vec<f64> = (0..seed.len()).map(|i| self.bval(a, i)).collect();
                self.acc_bcast(a, |i| seed[i] * bb[i], seed.len());
                self.acc_bcast(b, |i| seed[i] * aa[i], seed.len());
            }
            Op::Div(a, b) => {
                let bb: Vec<f64> = (0..seed.len()).map(|i| self.bval(b, i)).collect();
                let aa: Vec<f64> = (0..seed.len()).map(|i| self.bval(a, i)).collect();
                self.acc_bcast(a, |i| seed[i] / bb[i], seed.len());
                self.acc_bcast(b, |i| -seed[i] * aa[i] / (bb[i] * bb[i]), seed.len());
            }
            Op::Max(a, b) => {
                let aa: Vec<f64> = (0..seed.len()).map(|i| self.bval(a, i)).collect();
                let bb: Vec<f64> = (0..seed.len()).map(|i| self.bval(b, i)).collect();
                // ties route to the first operand
                self.acc_bcast(a, |i| if aa[i] >= bb[i] { seed[i] } else { 0.0 }, seed.len());
                self.acc_bcast(b, |i| if aa[i] < bb[i] { seed[i] } else { 0.0 }, seed.len());
            }
            Op::AddScalar(a) => self.acc_slice(a, seed),
            Op::MulScalar(a, c) => self.acc(a, |i| seed[i] * c),
            Op::MaxScalar(a, c) => {
                let x: Vec<f64> = self.in_data(a).to_vec();
                self.acc(a, |i| if x[i] > c { seed[i] } else { 0.0 });
            }
            Op::Neg(a) => self.acc(a, |i| -seed[i]),
            Op::Abs(a) => {
                let x: Vec<f64> = self.in_data(a).to_vec();
                // subgradient 0 at x == 0
                self.acc(a, |i| seed[i] * sign_zero(x[i]));
            }
            Op::Sqrt(a) => {
                let out: Vec<f64> = self.nodes[node].tensor.data.clone();
                // sqrt(0) backward is 0 by convention
                self.acc(a, |i| if out[i] > 0.0 { seed[i] / (2.0 * out[i]) } else { 0.0 });
            }
            Op::Tanh(a) => {
                let out: Vec<f64> = self.nodes[node].tensor.data.clone();
                self.acc(a, |i| seed[i] * (1.0 - out[i] * out[i]));
            }
            Op::Relu(a) => {
                let x: Vec<f64> = self.in_data(a).to_vec();
                self.acc(a, |i| if x[i] > 0.0 { seed[i] } else { 0.0 });
            }
            Op::Sum(a) => {
                let s = seed[0];
                self.acc(a, |_| s);
            }
            Op::Reshape(a) => self.acc_slice(a, seed),
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let da = gemm_nt(seed, self.in_data(b), m, n, k);
                    self.acc_slice(a, &da);
                }
                if self.needs(b) {
                    let db = gemm_tn(self.in_data(a), seed, m, k, n);
                    self.acc_slice(b, &db);
                }
            }
            Op::BiasRow(x, b) => {
                let d = self.shape(x)[1];
                self.acc_slice(x, seed);
                if self.needs(b) {
                    let mut db = vec![0.0; d];
                    for row in seed.chunks(d) {
                        for (g, &s) in db.iter_mut().zip(row) {
                            *g += s;
                        }
                    }
                    self.acc_slice(b, &db);
                }
            }
            Op::BiasChan(x, b) => {
                let (c, hw) = (self.shape(x)[1], self.shape(x)[2] * self.shape(x)[3]);
                self.acc_slice(x, seed);
                if self.needs(b) {
                    let mut db = vec![0.0; c];
                    for sample in seed.chunks(c * hw) {
                        for (ci, plane) in sample.chunks(hw).enumerate() {
                            db[ci] += plane.iter().sum::<f64>();
                        }
                    }
                    self.acc_slice(b, &db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let si = self.shape(input);
                let sk = self.shape(kernel);
                let so = self.shape(Var(node));
                let geom = ConvGeom {
                    n: si[0],
                    c: si[1],
                    h: si[2],
                    w: si[3],
                    f: sk[0],
                    kh: sk[2],
                    kw: sk[3],
                    stride,
                    padding,
                    oh: so[2],
                    ow: so[3],
                };
                let (dinput, dkernel) = conv2d_backward(
                    self.in_data(input),
                    self.in_data(kernel),
                    seed,
                    &geom,
                    self.needs(input),
                    self.needs(kernel),
                );
                if let Some(d) = dinput {
                    self.acc_slice(input, &d);
                }
                if let Some(d) = dkernel {
                    self.acc_slice(kernel, &d);
                }
            }
            Op::AvgPool {
                input,
                k,
                stride,
                same_size,
            } => {
                let si = self.shape(input).to_vec();
                let so = self.shape(Var(node)).to_vec();
                let d = avgpool_backward(seed, si[0], si[1], si[2], si[3], k, stride, same_size, so[2], so[3]);
                self.acc_slice(input, &d);
            }
            Op::Dropout { input, ref mask } => {
                let mask = mask.clone();
                self.acc(input, |i| seed[i] * mask[i]);
            }
            Op::Softmax(a) => {
                let out = self.nodes[node].tensor.data.clone();
                let cols = *self.shape(a).last().unwrap();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.len() / cols {
                    let s = &out[r * cols..(r + 1) * cols];
                    let g = &seed[r * cols..(r + 1) * cols];
                    let dot: f64 = s.iter().zip(g).map(|(&si, &gi)| si * gi).sum();
                    for j in 0..cols {
                        d[r * cols + j] = s[j] * (g[j] - dot);
                    }
                }
                self.acc_slice(a, &d);
            }
            Op::CrossEntropy { logits, ref labels } => {
                let cols = *self.shape(logits).last().unwrap();
                let rows = labels.len();
                let src = self.in_data(logits).to_vec();
                let mut d = vec![0.0; src.len()];
                let scale = seed[0] / rows as f64;
                let mut probs = vec![0.0; cols];
                for (r, &y) in labels.iter().enumerate() {
                    let row = &src[r * cols..(r + 1) * cols];
                    softmax_row(row, &mut probs);
                    for j in 0..cols {
                        d[r * cols + j] = scale * (probs[j] - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.acc_slice(logits, &d);
            }
            Op::Margin {
                logits,
                class,
                kappa,
                untargeted,
            } => {
                let g = self.in_data(logits);
                let (best, _) = argmax_excluding(g, class);
                let margin = if untargeted { g[class] - g[best] } else { g[best] - g[class] };
                if margin > kappa {
                    let s = seed[0];
                    let (pos, neg) = if untargeted { (class, best) } else { (best, class) };
                    if self.needs(logits) {
                        let grad = self.nodes[logits.0].tensor.grad.as_mut().unwrap();
                        grad[pos] += s;
                        grad[neg] -= s;
                    }
                }
            }
            Op::FlowTv { flow, eps, su, sv } => {
                let s = self.shape(flow).to_vec();
                let (h, w) = (s[1], s[2]);
                let data = self.in_data(flow);
                let (du, dv) = data.split_at(h * w);
                let mut d = vec![0.0; data.len()];
                let seed0 = seed[0];
                {
                    let (gdu, gdv) = d.split_at_mut(h * w);
                    for_each_directed_pair(h, w, |p, q| {
                        let tu = su * (du[p] - du[q]);
                        let tv = sv * (dv[p] - dv[q]);
                        let root = (tu * tu + tv * tv + eps).sqrt();
                        if root > 0.0 {
                            let cu = seed0 * su * tu / root;
                            let cv = seed0 * sv * tv / root;
                            gdu[p] += cu;
                            gdu[q] -= cu;
                            gdv[p] += cv;
                            gdv[q] -= cv;
                        }
                    });
                }
                self.acc_slice(flow, &d);
            }
            Op::Warp { image, flow } => {
                let si = self.shape(image).to_vec();
                let (c, h, w) = (si[0], si[1], si[2]);
                let fdata = self.in_data(flow);
                let (du, dv) = fdata.split_at(h * w);
                let (dimg, dflow) = warp_backward(
                    self.in_data(image),
                    c,
                    h,
                    w,
                    du,
                    dv,
                    seed,
                    self.needs(image),
                    self.needs(flow),
                );
                if let Some(d) = dimg {
                    self.acc_slice(image, &d);
                }
                if let Some(d) = dflow {
                    self.acc_slice(flow, &d);
                }
            }
        }
    }
}

fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Index of the largest logit with `skip` excluded; ties break to the lowest
/// index.
pub(crate) fn argmax_excluding(g: &[f64], skip: usize) -> (usize, f64) {
    let mut best = usize::MAX;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in g.iter().enumerate() {
        if i != skip && v > bv {
            bv = v;
            best = i;
        }
    }
    (best, bv)
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::InvalidArgument(format!(
            "conv window {k} larger than padded input {padded}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "conv geometry not integral: (({size}+2*{pad})-{k}) not divisible by stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Visit every ordered pair (p, q) of 4-connected grid neighbors once.
fn for_each_directed_pair(h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    for u in 0..h {
        for v in 0..w {
            let p = u * w + v;
            if u > 0 {
                f(p, p - w);
            }
            if u + 1 < h {
                f(p, p + w);
            }
            if v > 0 {
                f(p, p - 1);
            }
            if v + 1 < w {
                f(p, p + 1);
            }
        }
    }
}

// ── gemm kernels ────────────────────────────────────────────────────
//
// All three variants block one loop dimension so the streamed operand stays
// in cache across the sweep; the conv matrices are far bigger than L2 and
// the naive orderings are memory-bound.

const PAR_WORK: usize = 400_000;
const BLOCK: usize = 192;

/// c[m,n] = a[m,k] * b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let parallel = m * k * n >= PAR_WORK && m > 1;
    for kb in (0..k).step_by(BLOCK) {
        let kend = (kb + BLOCK).min(k);
        let row_job = |i: usize, crow: &mut [f64]| {
            let arow = &a[i * k..(i + 1) * k];
            let mut l = kb;
            // 4 k-rows per pass keeps the c-row in registers longer
            while l + 4 <= kend {
                let (a0, a1, a2, a3) = (arow[l], arow[l + 1], arow[l + 2], arow[l + 3]);
                let b0 = &b[l * n..(l + 1) * n];
                let b1 = &b[(l + 1) * n..(l + 2) * n];
                let b2 = &b[(l + 2) * n..(l + 3) * n];
                let b3 = &b[(l + 3) * n..(l + 4) * n];
                for j in 0..n {
                    crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                l += 4;
            }
            while l < kend {
                let av = arow[l];
                let brow = &b[l * n..(l + 1) * n];
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj += av * bj;
                }
                l += 1;
            }
        };
        if parallel {
            c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row_job(i, crow));
        } else {
            for (i, crow) in c.chunks_mut(n).enumerate() {
                row_job(i, crow);
            }
        }
    }
    c
}

/// c[m,p] = a[m,l] * b[p,l]^T
fn gemm_nt(a: &[f64], b: &[f64], m: usize, l: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    let parallel = m * l * p >= PAR_WORK && m > 1;
    for jb in (0..p).step_by(BLOCK) {
        let jend = (jb + BLOCK).min(p);
        let row_job = |i: usize, crow: &mut [f64]| {
            let arow = &a[i * l..(i + 1) * l];
            let mut j = jb;
            // 4 dot products share one pass over the a-row
            while j + 4 <= jend {
                let b0 = &b[j * l..(j + 1) * l];
                let b1 = &b[(j + 1) * l..(j + 2) * l];
                let b2 = &b[(j + 2) * l..(j + 3) * l];
                let b3 = &b[(j + 3) * l..(j + 4) * l];
                let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
                for (idx, &av) in arow.iter().enumerate() {
                    s0 += av * b0[idx];
                    s1 += av * b1[idx];
                    s2 += av * b2[idx];
                    s3 += av * b3[idx];
                }
                crow[j] = s0;
                crow[j + 1] = s1;
                crow[j + 2] = s2;
                crow[j + 3] = s3;
                j += 4;
            }
            while j < jend {
                let brow = &b[j * l..(j + 1) * l];
                let mut s = 0.0;
                for (&av, &bv) in arow.iter().zip(brow) {
                    s += av * bv;
                }
                crow[j] = s;
                j += 1;
            }
        };
        if parallel {
            c.par_chunks_mut(p).enumerate().for_each(|(i, crow)| row_job(i, crow));
        } else {
            for (i, crow) in c.chunks_mut(p).enumerate() {
                row_job(i, crow);
            }
        }
    }
    c
}

/// c[k,n] = a[m,k]^T * b[m,n]
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let parallel = k * m * n >= PAR_WORK && k > 1;
    // block rows of C so each block stays hot across the full l sweep,
    // with 4 l-rows per pass to cut the C traffic
    let block_job = |ib: usize, cblock: &mut [f64]| {
        let mut l = 0;
        while l + 4 <= m {
            let b0 = &b[l * n..(l + 1) * n];
            let b1 = &b[(l + 1) * n..(l + 2) * n];
            let b2 = &b[(l + 2) * n..(l + 3) * n];
            let b3 = &b[(l + 3) * n..(l + 4) * n];
            for (i, crow) in cblock.chunks_mut(n).enumerate() {
                let a0 = a[l * k + ib + i];
                let a1 = a[(l + 1) * k + ib + i];
                let a2 = a[(l + 2) * k + ib + i];
                let a3 = a[(l + 3) * k + ib + i];
                for j in 0..n {
                    crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
            }
            l += 4;
        }
        while l < m {
            let brow = &b[l * n..(l + 1) * n];
            let arow = &a[l * k..(l + 1) * k];
            for (i, crow) in cblock.chunks_mut(n).enumerate() {
                let av = arow[ib + i];
                if av != 0.0 {
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj += av * bj;
                    }
                }
            }
            l += 1;
        }
    };
    if parallel {
        c.par_chunks_mut(BLOCK * n)
            .enumerate()
            .for_each(|(bi, cblock)| block_job(bi * BLOCK, cblock));
    } else {
        for (bi, cblock) in c.chunks_mut(BLOCK * n).enumerate() {
            block_job(bi * BLOCK, cblock);
        }
    }
    c
}

// ── conv2d ──────────────────────────────────────────────────────────

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
    fn in_stride(&self) -> usize {
        self.c * self.h * self.w
    }
    fn out_stride(&self) -> usize {
        self.f * self.ohw()
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w, ow, ohw) = (g.h, g.w, g.ow, g.ohw());
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst_row = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut dst_row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let shift = kx as isize - g.padding as isize;
                        let lo = (-shift).max(0).min(ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        dst[..lo].fill(0.0);
                        if hi > lo {
                            let s = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src_row[s..s + (hi - lo)]);
                        }
                        if hi < ow {
                            dst[hi..].fill(0.0);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (h, w, ow, ohw) = (g.h, g.w, g.ow, g.ohw());
    let mut row = 0;
    for ci in 0..g.c {
        let plane_off = ci * h * w;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src_row = &dcols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = plane_off + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[base + ix as usize] += src_row[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.out_stride()];
    let sample_job = |s: usize, out_s: &mut [f64]| {
        let x = &input[s * g.in_stride()..(s + 1) * g.in_stride()];
        let mut cols = vec![0.0; g.ckk() * g.ohw()];
        im2col(x, g, &mut cols);
        let prod = gemm_nn(kernel, &cols, g.f, g.ckk(), g.ohw());
        out_s.copy_from_slice(&prod);
    };
    if g.n > 1 {
        out.par_chunks_mut(g.out_stride())
            .enumerate()
            .for_each(|(s, out_s)| sample_job(s, out_s));
    } else {
        sample_job(0, &mut out);
    }
    out
}

fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dinput = if need_input {
        Some(vec![0.0; input.len()])
    } else {
        None
    };

    // Each sample's input-gradient slice is disjoint; kernel gradients are
    // accumulated per chunk and summed in chunk order for determinism.
    let sample_job = |s: usize, dx_s: Option<&mut [f64]>, dk: Option<&mut [f64]>| {
        let dout_s = &dout[s * g.out_stride()..(s + 1) * g.out_stride()];
        let x = &input[s * g.in_stride()..(s + 1) * g.in_stride()];
        if let Some(dk) = dk {
            let mut cols = vec![0.0; g.ckk() * g.ohw()];
            im2col(x, g, &mut cols);
            // dk[f, ckk] += dout_s[f, ohw] * cols[ckk, ohw]^T
            let contrib = gemm_nt(dout_s, &cols, g.f, g.ohw(), g.ckk());
            for (a, &b) in dk.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        if let Some(dx_s) = dx_s {
            let dcols = gemm_tn(kernel, dout_s, g.f, g.ckk(), g.ohw());
            col2im_add(&dcols, g, dx_s);
        }
    };

    let dkernel = if g.n > 1 {
        let threads = rayon::current_num_threads().max(1);
        let chunk = g.n.div_ceil(threads * 2).max(1);
        let mut dx_chunks: Vec<Option<&mut [f64]>> = Vec::new();
        let mut dx_storage = dinput.as_deref_mut();
        if let Some(buf) = dx_storage.take() {
            for c in buf.chunks_mut(chunk * g.in_stride()) {
                dx_chunks.push(Some(c));
            }
        }
        let n_chunks = g.n.div_ceil(chunk);
        if dx_chunks.is_empty() {
            dx_chunks.resize_with(n_chunks, || None);
        }
        let partials: Vec<Option<Vec<f64>>> = dx_chunks
            .into_par_iter()
            .enumerate()
            .map(|(ci, dx_chunk)| {
                let s0 = ci * chunk;
                let s1 = ((ci + 1) * chunk).min(g.n);
                let mut dk = if need_kernel {
                    Some(vec![0.0; kernel.len()])
                } else {
                    None
                };
                let mut dx_chunk = dx_chunk;
                for s in s0..s1 {
                    let dx_s = dx_chunk
                        .as_mut()
                        .map(|c| &mut c[(s - s0) * g.in_stride()..(s - s0 + 1) * g.in_stride()]);
                    sample_job(s, dx_s, dk.as_deref_mut());
                }
                dk
            })
            .collect();
        if need_kernel {
            let mut dk = vec![0.0; kernel.len()];
            for p in partials.into_iter().flatten() {
                for (a, b) in dk.iter_mut().zip(p) {
                    *a += b;
                }
            }
            Some(dk)
        } else {
            None
        }
    } else {
        let mut dk = if need_kernel {
            Some(vec![0.0; kernel.len()])
        } else {
            None
        };
        sample_job(0, dinput.as_deref_mut(), dk.as_deref_mut());
        dk
    };

    (dinput, dkernel)
}

// ── average pooling ─────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn avgpool_forward(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    same_size: bool,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c * oh * ow];
    let inv = 1.0 / (k * k) as f64;
    let pad = if same_size { (k - 1) / 2 } else { 0 };
    for (plane_idx, out_plane) in out.chunks_mut(oh * ow).enumerate() {
        let plane = &input[plane_idx * h * w..(plane_idx + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ky in 0..k {
                    // edge replication clamps the source index in place
                    let iy = clamp_idx(oy * stride + ky, pad, h);
                    for kx in 0..k {
                        let ix = clamp_idx(ox * stride + kx, pad, w);
                        s += plane[iy * w + ix];
                    }
                }
                out_plane[oy * ow + ox] = s * inv;
            }
        }
    }
    let _ = (n, c);
    out
}

#[allow(clippy::too_many_arguments)]
fn avgpool_backward(
    dout: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    same_size: bool,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * c * h * w];
    let inv = 1.0 / (k * k) as f64;
    let pad = if same_size { (k - 1) / 2 } else { 0 };
    for (plane_idx, dplane) in dx.chunks_mut(h * w).enumerate() {
        let dop = &dout[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dop[oy * ow + ox] * inv;
                for ky in 0..k {
                    let iy = clamp_idx(oy * stride + ky, pad, h);
                    for kx in 0..k {
                        let ix = clamp_idx(ox * stride + kx, pad, w);
                        dplane[iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

fn clamp_idx(pos: usize, pad: usize, size: usize) -> usize {
    (pos as isize - pad as isize).clamp(0, size as isize - 1) as usize
}

// ── bilinear warp ───────────────────────────────────────────────────

/// Forward bilinear sampling shared by the tape op and the standalone warp
/// API. `image` is `[C,H,W]`, `du`/`dv` are the row/column displacement
/// planes. Source coordinates are clamped to the image rectangle.
pub(crate) fn warp_forward(image: &[f64], c: usize, h: usize, w: usize, du: &[f64], dv: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    let hw = h * w;
    for u in 0..h {
        for v in 0..w {
            let p = u * w + v;
            let su = (u as f64 + du[p]).clamp(0.0, (h - 1) as f64);
            let sv = (v as f64 + dv[p]).clamp(0.0, (w - 1) as f64);
            let u0 = su.floor() as usize;
            let v0 = sv.floor() as usize;
            let u1 = (u0 + 1).min(h - 1);
            let v1 = (v0 + 1).min(w - 1);
            let au = su - u0 as f64;
            let av = sv - v0 as f64;
            let w00 = (1.0 - au) * (1.0 - av);
            let w01 = (1.0 - au) * av;
            let w10 = au * (1.0 - av);
            let w11 = au * av;
            for ci in 0..c {
                let plane = &image[ci * hw..(ci + 1) * hw];
                out[ci * hw + p] = w00 * plane[u0 * w + v0]
                    + w01 * plane[u0 * w + v1]
                    + w10 * plane[u1 * w + v0]
                    + w11 * plane[u1 * w + v1];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn warp_backward(
    image: &[f64],
    c: usize,
    h: usize,
    w: usize,
    du: &[f64],
    dv: &[f64],
    seed: &[f64],
    need_image: bool,
    need_flow: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = h * w;
    let mut dimg = if need_image { Some(vec![0.0; c * hw]) } else { None };
    let mut dflow = if need_flow { Some(vec![0.0; 2 * hw]) } else { None };
    for u in 0..h {
        for v in 0..w {
            let p = u * w + v;
            let su_raw = u as f64 + du[p];
            let sv_raw = v as f64 + dv[p];
            let su = su_raw.clamp(0.0, (h - 1) as f64);
            let sv = sv_raw.clamp(0.0, (w - 1) as f64);
            // clamp saturates: no flow gradient outside the open interval
            let u_active = su_raw > 0.0 && su_raw < (h - 1) as f64;
            let v_active = sv_raw > 0.0 && sv_raw < (w - 1) as f64;
            let u0 = su.floor() as usize;
            let v0 = sv.floor() as usize;
            let u1 = (u0 + 1).min(h - 1);
            let v1 = (v0 + 1).min(w - 1);
            let au = su - u0 as f64;
            let av = sv - v0 as f64;
            let (mut gdu, mut gdv) = (0.0, 0.0);
            for ci in 0..c {
                let s = seed[ci * hw + p];
                if s == 0.0 {
                    continue;
                }
                let plane = &image[ci * hw..(ci + 1) * hw];
                let x00 = plane[u0 * w + v0];
                let x01 = plane[u0 * w + v1];
                let x10 = plane[u1 * w + v0];
                let x11 = plane[u1 * w + v1];
                if let Some(d) = dimg.as_mut() {
                    let dp = &mut d[ci * hw..(ci + 1) * hw];
                    dp[u0 * w + v0] += s * (1.0 - au) * (1.0 - av);
                    dp[u0 * w + v1] += s * (1.0 - au) * av;
                    dp[u1 * w + v0] += s * au * (1.0 - av);
                    dp[u1 * w + v1] += s * au * av;
                }
                if need_flow {
                    if u_active {
                        gdu += s * ((1.0 - av) * (x10 - x00) + av * (x11 - x01));
                    }
                    if v_active {
                        gdv += s * ((1.0 - au) * (x01 - x00) + au * (x11 - x10));
                    }
                }
            }
            if let Some(d) = dflow.as_mut() {
                d[p] += gdu;
                d[hw + p] += gdv;
            }
        }
    }
    (dimg, dflow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_add() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn sqrt_backward_quarter() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[4.0]).with_grad());
        let s = tape.sqrt(a);
        assert_eq!(tape.data(s), &[2.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.25]);
    }

    #[test]
    fn sqrt_backward_at_zero_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[0.0]).with_grad());
        let s = tape.sqrt(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0]);
    }

    #[test]
    fn abs_backward_sign() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[-3.0]).with_grad());
        let s = tape.abs(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[-1.0]);
    }

    #[test]
    fn abs_and_relu_subgradient_zero_at_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[0.0, 0.0]).with_grad());
        let s1 = tape.abs(a);
        let s2 = tape.relu(a);
        let both = tape.add(s1, s2).unwrap();
        let loss = tape.sum(both);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(d), &[11.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = crate::rng(7);
        use rand::Rng;
        let a0: Vec<f64> = (0..12).map(|_| rng.random::<f64>() - 0.5).collect();
        let b0: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();

        let eval = |av: &[f64], bv: &[f64], grad: bool| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let a = tape.leaf(t(&[3, 4], av).with_grad());
            let b = tape.leaf(t(&[4, 2], bv).with_grad());
            let c = tape.matmul(a, b).unwrap();
            let sq = tape.mul(c, c).unwrap();
            let loss = tape.sum(sq);
            let v = tape.scalar_value(loss);
            if grad {
                tape.backward(loss).unwrap();
                (v, tape.grad(a).unwrap().to_vec(), tape.grad(b).unwrap().to_vec())
            } else {
                (v, vec![], vec![])
            }
        };

        let (_, ga, gb) = eval(&a0, &b0, true);
        let na = central_diff(|x| eval(x, &b0, false).0, &a0, 1e-4);
        let nb = central_diff(|x| eval(&a0, x, false).0, &b0, 1e-4);
        assert!(max_rel_err(&ga, &na) <= 1e-6, "{}", max_rel_err(&ga, &na));
        assert!(max_rel_err(&gb, &nb) <= 1e-6, "{}", max_rel_err(&gb, &nb));
    }

    #[test]
    fn conv_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let k = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[9.0]);
    }

    #[test]
    fn conv_delta_image_reads_kernel() {
        // A centered delta input makes each valid output position pick out one
        // kernel tap; with a 3x3 kernel on a 5x5 delta image the 3x3 output is
        // the kernel flipped in both axes (cross-correlation convention).
        let mut delta = vec![0.0; 25];
        delta[12] = 1.0;
        let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 5, 5], &delta));
        let k = tape.leaf(t(&[1, 1, 3, 3], &kernel));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        // independent direct evaluation of the cross-correlation sum
        let mut expect = vec![0.0; 9];
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        s += delta[(oy + ky) * 5 + (ox + kx)] * kernel[ky * 3 + kx];
                    }
                }
                expect[oy * 3 + ox] = s;
            }
        }
        assert_eq!(tape.data(y), &expect[..]);
        assert_eq!(expect, vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = crate::rng(11);
        use rand::Rng;
        let x0: Vec<f64> = (0..2 * 2 * 5 * 5).map(|_| rng.random::<f64>() - 0.5).collect();
        let k0: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.random::<f64>() - 0.5).collect();

        let eval = |xv: &[f64], kv: &[f64], grad: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[2, 2, 5, 5], xv).with_grad());
            let k = tape.leaf(t(&[3, 2, 3, 3], kv).with_grad());
            let y = tape.conv2d(x, k, 2, 1).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq);
            let v = tape.scalar_value(loss);
            if grad {
                tape.backward(loss).unwrap();
                (v, tape.grad(x).unwrap().to_vec(), tape.grad(k).unwrap().to_vec())
            } else {
                (v, vec![], vec![])
            }
        };
        let (_, gx, gk) = eval(&x0, &k0, true);
        let nx = central_diff(|p| eval(p, &k0, false).0, &x0, 1e-4);
        let nk = central_diff(|p| eval(&x0, p, false).0, &k0, 1e-4);
        assert!(max_rel_err(&gx, &nx) <= 1e-5);
        assert!(max_rel_err(&gk, &nk) <= 1e-5);
    }

    #[test]
    fn conv_rejects_non_integer_geometry() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 5, 5]));
        let k = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(tape.conv2d(x, k, 2, 0).is_err());
    }

    #[test]
    fn avgpool_constant_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 4, 4], &[0.7; 16]));
        let y = tape.avgpool2d(x, 3, 1, true).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        for &v in tape.data(y) {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn avgpool_same_size_center_delta() {
        let mut data = vec![0.0; 9];
        data[4] = 9.0;
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &data));
        let y = tape.avgpool2d(x, 3, 1, true).unwrap();
        // center window covers the whole image: mean = 9/9 = 1
        assert!((tape.data(y)[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn avgpool_gradient_matches_finite_differences() {
        let mut rng = crate::rng(13);
        use rand::Rng;
        let x0: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        let eval = |xv: &[f64], grad: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1, 1, 4, 4], xv).with_grad());
            let y = tape.avgpool2d(x, 3, 1, true).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq);
            let v = tape.scalar_value(loss);
            if grad {
                tape.backward(loss).unwrap();
                (v, tape.grad(x).unwrap().to_vec())
            } else {
                (v, vec![])
            }
        };
        let (_, gx) = eval(&x0, true);
        let nx = central_diff(|p| eval(p, false).0, &x0, 1e-4);
        assert!(max_rel_err(&gx, &nx) <= 1e-6);
    }

    #[test]
    fn avgpool_window_too_large() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(tape.avgpool2d(x, 3, 1, false).is_err());
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_saturated_is_near_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[30.0, 0.0, 0.0]));
        let ce = tape.cross_entropy(x, &[0]).unwrap();
        assert!(tape.scalar_value(ce) < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3]));
        assert!(tape.cross_entropy(x, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = crate::rng(17);
        use rand::Rng;
        let x0: Vec<f64> = (0..8).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let eval = |xv: &[f64], grad: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[2, 4], xv).with_grad());
            let ce = tape.cross_entropy(x, &[1, 3]).unwrap();
            let v = tape.scalar_value(ce);
            if grad {
                tape.backward(ce).unwrap();
                (v, tape.grad(x).unwrap().to_vec())
            } else {
                (v, vec![])
            }
        };
        let (_, gx) = eval(&x0, true);
        let nx = central_diff(|p| eval(p, false).0, &x0, 1e-4);
        assert!(max_rel_err(&gx, &nx) <= 1e-6);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[5.0, -2.0, 0.5]).with_grad());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn duplicate_path_accumulates_sum_of_partials() {
        // loss = x + 2x uses x twice; grad must be 3, not 1 or 2.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.5]).with_grad());
        let two_x = tape.mul_scalar(x, 2.0);
        let loss = tape.add(x, two_x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn composite_network_gradient_matches_finite_differences() {
        // conv -> relu -> dense -> cross-entropy, checked end to end
        let mut rng = crate::rng(23);
        use rand::Rng;
        let x0: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        let k0: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
        let w0: Vec<f64> = (0..9 * 3).map(|_| rng.random::<f64>() - 0.5).collect();

        let eval = |xv: &[f64], kv: &[f64], wv: &[f64], grad: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1, 1, 4, 4], xv).with_grad());
            let k = tape.leaf(t(&[1, 1, 2, 2], kv).with_grad());
            let w = tape.leaf(t(&[9, 3], wv).with_grad());
            let c = tape.conv2d(x, k, 1, 0).unwrap();
            let r = tape.relu(c);
            let flat = tape.reshape(r, vec![1, 9]).unwrap();
            let logits = tape.matmul(flat, w).unwrap();
            let loss = tape.cross_entropy(logits, &[2]).unwrap();
            let v = tape.scalar_value(loss);
            if grad {
                tape.backward(loss).unwrap();
                (
                    v,
                    tape.grad(x).unwrap().to_vec(),
                    tape.grad(k).unwrap().to_vec(),
                    tape.grad(w).unwrap().to_vec(),
                )
            } else {
                (v, vec![], vec![], vec![])
            }
        };
        let (_, gx, gk, gw) = eval(&x0, &k0, &w0, true);
        let nx = central_diff(|p| eval(p, &k0, &w0, false).0, &x0, 1e-3);
        let nk = central_diff(|p| eval(&x0, p, &w0, false).0, &k0, 1e-3);
        let nw = central_diff(|p| eval(&x0, &k0, p, false).0, &w0, 1e-3);
        assert!(max_rel_err(&gx, &nx) <= 1e-4);
        assert!(max_rel_err(&gk, &nk) <= 1e-4);
        assert!(max_rel_err(&gw, &nw) <= 1e-4);
    }

    #[test]
    fn margin_loss_examples() {
        // logits [0,10], target 1: margin floored at 0
        let mut tape = Tape::new();
        let g = tape.leaf(t(&[2], &[0.0, 10.0]));
        let l = tape.margin_loss(g, 1, 0.0, false).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        let mut tape = Tape::new();
        let g = tape.leaf(t(&[2], &[5.0, 3.0]));
        let l = tape.margin_loss(g, 1, 0.0, false).unwrap();
        assert_eq!(tape.scalar_value(l), 2.0);

        let mut tape = Tape::new();
        let g = tape.leaf(t(&[2], &[5.0, 3.0]));
        let l = tape.margin_loss(g, 1, 3.0, false).unwrap();
        assert_eq!(tape.scalar_value(l), 3.0);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut tape = Tape::new();
        let mut rng = crate::rng(3);
        let x = tape.leaf(t(&[1000], &[1.0; 1000]).with_grad());
        let d = tape.dropout(x, 0.5, &mut rng).unwrap();
        let kept: Vec<f64> = tape.data(d).iter().copied().filter(|&v| v != 0.0).collect();
        assert!(kept.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        // roughly half survive
        assert!(kept.len() > 400 && kept.len() < 600, "{}", kept.len());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_positive(
            vals in proptest::collection::vec(-30.0f64..30.0, 2..12)
        ) {
            let mut tape = Tape::new();
            let n = vals.len();
            let x = tape.leaf(t(&[1, n], &vals));
            let s = tape.softmax(x).unwrap();
            let row = tape.data(s);
            let sum: f64 = row.iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(row.iter().all(|&p| p > 0.0));
        }

        #[test]
        fn max_elem_matches_pointwise_max(
            a in proptest::collection::vec(-10.0f64..10.0, 1..8),
        ) {
            let b: Vec<f64> = a.iter().map(|x| -x).collect();
            let mut tape = Tape::new();
            let va = tape.leaf(t(&[a.len()], &a));
            let vb = tape.leaf(t(&[b.len()], &b));
            let m = tape.max_elem(va, vb).unwrap();
            for (i, &v) in tape.data(m).iter().enumerate() {
                proptest::prop_assert_eq!(v, a[i].max(b[i]));
            }
        }
    }
}
