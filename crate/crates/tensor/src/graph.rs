//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes the
//! output value immediately and appends a node. [`Graph::backward`] walks
//! the tape in reverse. Second-order quantities (for example the parameter
//! gradient of an input-gradient norm) are obtained by recording a
//! forward-mode tangent computation on the same tape and differentiating
//! it, so every op here only needs a first-order adjoint.

use crate::kernels::{self, ConvDims, ConvGeom};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d { x: Var, w: Var, dims: ConvDims },
    Linear { x: Var, w: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    ChannelAdd(Var, Var),
    ChannelSub(Var, Var),
    ChannelMul(Var, Var),
    ChannelMean(Var),
    Square(Var),
    Rsqrt(Var),
    LeakyRelu(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    Clamp(Var, T, T),
    MaskMul(Var, Tensor<T>),
    Upsample2x(Var),
    Reshape(Var),
    SampleSum(Var),
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match self {
            Leaf => [None, None],
            Conv3d { x, w, .. } | Linear { x, w } => [Some(*x), Some(*w)],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ChannelAdd(a, b) | ChannelSub(a, b) | ChannelMul(a, b) => {
                [Some(*a), Some(*b)]
            }
            Scale(a, _)
            | Offset(a)
            | ChannelMean(a)
            | Square(a)
            | Rsqrt(a)
            | LeakyRelu(a, _)
            | Relu(a)
            | Tanh(a)
            | Sigmoid(a)
            | Ln(a)
            | Abs(a)
            | Clamp(a, _, _)
            | MaskMul(a, _)
            | Upsample2x(a)
            | Reshape(a)
            | SampleSum(a)
            | Sum(a)
            | Mean(a) => [Some(*a), None],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that gradients may be requested for (e.g. an interpolated
    /// critic input).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant by every backward pass.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, leaf_grad: bool) -> Var {
        let requires_grad = match &op {
            Op::Leaf => leaf_grad,
            other => other
                .inputs()
                .iter()
                .flatten()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    // ---------------------------------------------------------------
    // Ops
    // ---------------------------------------------------------------

    /// 3D convolution without bias: `x [N,Cin,D,H,W]`, `w [Cout,Cin,k,k,k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 5, "conv3d: input must be [N,C,D,H,W], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d: weight must be [Cout,Cin,k,k,k], got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv3d: channel mismatch {xs:?} vs {ws:?}");
        assert!(ws[2] == geom.kernel && ws[3] == geom.kernel && ws[4] == geom.kernel);
        let out = [xs[2], xs[3], xs[4]].map(|l| {
            geom.out_len(l)
                .unwrap_or_else(|| panic!("conv3d: kernel {} does not fit extent {l}", geom.kernel))
        });
        let dims = ConvDims {
            cin: xs[1],
            cout: ws[0],
            inp: [xs[2], xs[3], xs[4]],
            out,
        geom,
        };
        let n = xs[0];
        let mut y = Tensor::zeros(&[n, ws[0], out[0], out[1], out[2]]);
        kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            y.data_mut(),
            n,
            &dims,
        );
        self.push(y, Op::Conv3d { x, w, dims }, false)
    }

    /// Fully connected map `x [N,in] · w[out,in]^T`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear: {xs:?} vs {ws:?}");
        let mut y = Tensor::zeros(&[xs[0], ws[0]]);
        matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            y.data_mut(),
            xs[0],
            xs[1],
            ws[0],
            false,
        );
        self.push(y, Op::Linear { x, w }, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), false)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    fn channel_binary(&mut self, x: Var, c: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        let (n, ch, s) = xv.channel_split();
        assert_eq!(
            self.shape(c),
            &[ch],
            "channel op: per-channel operand must have shape [{ch}]"
        );
        let cv = self.value(c).data();
        let mut out = xv.clone();
        for b in 0..n {
            for k in 0..ch {
                let cv = cv[k];
                for v in &mut out.data_mut()[(b * ch + k) * s..(b * ch + k + 1) * s] {
                    *v = f(*v, cv);
                }
            }
        }
        out
    }

    /// `x[n,c,...] + v[c]`.
    pub fn channel_add(&mut self, x: Var, v: Var) -> Var {
        let out = self.channel_binary(x, v, |a, b| a + b);
        self.push(out, Op::ChannelAdd(x, v), false)
    }

    /// `x[n,c,...] - v[c]`.
    pub fn channel_sub(&mut self, x: Var, v: Var) -> Var {
        let out = self.channel_binary(x, v, |a, b| a - b);
        self.push(out, Op::ChannelSub(x, v), false)
    }

    /// `x[n,c,...] * v[c]`.
    pub fn channel_mul(&mut self, x: Var, v: Var) -> Var {
        let out = self.channel_binary(x, v, |a, b| a * b);
        self.push(out, Op::ChannelMul(x, v), false)
    }

    /// Mean over batch and spatial axes, giving shape `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, ch, s) = xv.channel_split();
        let inv = T::one() / T::from_f64((n * s) as f64);
        let mut out = Tensor::zeros(&[ch]);
        for b in 0..n {
            for k in 0..ch {
                let part: T = xv.data()[(b * ch + k) * s..(b * ch + k + 1) * s].iter().copied().sum();
                out.data_mut()[k] += part;
            }
        }
        for v in out.data_mut() {
            *v *= inv;
        }
        self.push(out, Op::ChannelMean(x), false)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise `x^{-1/2}`.
    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Rsqrt(a), |x| x.sqrt().recip())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask_mul(&mut self, a: Var, mask: Tensor<T>) -> Var {
        assert_eq!(self.shape(a), mask.shape(), "mask_mul: shape mismatch");
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(v, Op::MaskMul(a, mask), false)
    }

    /// Nearest-neighbour 2x upscale of `[N,C,D,H,W]`.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 5, "upsample2x: expected [N,C,D,H,W], got {s:?}");
        let mut y = Tensor::zeros(&[s[0], s[1], 2 * s[2], 2 * s[3], 2 * s[4]]);
        kernels::upsample2x(self.value(a).data(), s[0] * s[1], [s[2], s[3], s[4]], y.data_mut());
        self.push(y, Op::Upsample2x(a), false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::Reshape(a), false)
    }

    /// Sum over every axis but the first: `[N, ...] -> [N]`.
    pub fn sample_sum(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let (n, per) = xv.batch_split();
        let out = Tensor::from_fn(&[n], |b| xv.data()[b * per..(b + 1) * per].iter().copied().sum());
        self.push(out, Op::SampleSum(a), false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), false)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let v = Tensor::scalar(xv.sum() / T::from_f64(xv.numel() as f64));
        self.push(v, Op::Mean(a), false)
    }

    // ---------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------

    /// Gradients of a scalar node with respect to every node that requires
    /// them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        self.backward_impl(loss, None)
    }

    /// Gradients of a scalar node, propagated only along paths that reach
    /// one of `wrt`.
    pub fn backward_wrt(&self, loss: Var, wrt: &[Var]) -> Gradients<T> {
        self.backward_impl(loss, Some(wrt))
    }

    fn backward_impl(&self, loss: Var, wrt: Option<&[Var]>) -> Gradients<T> {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward: loss must be a single element"
        );
        let len = loss.0 + 1;
        let mut live = vec![false; len];
        for i in 0..len {
            let node = &self.nodes[i];
            live[i] = match (&node.op, wrt) {
                (Op::Leaf, Some(w)) => node.requires_grad && w.iter().any(|v| v.0 == i),
                (Op::Leaf, None) => node.requires_grad,
                (op, _) => op.inputs().iter().flatten().any(|v| live[v.0]),
            };
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..len).map(|_| None).collect();
        if !live[loss.0] {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..len).rev() {
            if !live[i] {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &live, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, dy: &Tensor<T>, live: &[bool], grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let want = |v: &Var| live[v.0];
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, dims } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape()[0];
                let mut dx = want(x).then(|| Tensor::zeros(xv.shape()));
                let mut dw = want(w).then(|| Tensor::zeros(wv.shape()));
                kernels::conv3d_backward(
                    xv.data(),
                    wv.data(),
                    dy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    n,
                    dims,
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::Linear { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if want(x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    matmul(dy.data(), false, wv.data(), false, dx.data_mut(), n, fout, fin, false);
                    accumulate(grads, *x, dx);
                }
                if want(w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    matmul(dy.data(), true, xv.data(), false, dw.data_mut(), fout, n, fin, false);
                    accumulate(grads, *w, dw);
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, *a, dy.clone());
                }
                if want(b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    accumulate(grads, *a, dy.clone());
                }
                if want(b) {
                    accumulate(grads, *b, dy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    accumulate(grads, *a, dy.zip_map(self.value(*b), |g, v| g * v));
                }
                if want(b) {
                    accumulate(grads, *b, dy.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, dy.map(|g| g * s));
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                let g = dy.clone().reshape(&shape).expect("reshape adjoint");
                accumulate(grads, *a, g);
            }
            Op::ChannelAdd(x, c) | Op::ChannelSub(x, c) => {
                let sign = if matches!(node.op, Op::ChannelSub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if want(x) {
                    accumulate(grads, *x, dy.clone());
                }
                if want(c) {
                    let (n, ch, s) = dy.channel_split();
                    let mut dc = Tensor::zeros(&[ch]);
                    for b in 0..n {
                        for k in 0..ch {
                            let part: T = dy.data()[(b * ch + k) * s..(b * ch + k + 1) * s].iter().copied().sum();
                            dc.data_mut()[k] += part * sign;
                        }
                    }
                    accumulate(grads, *c, dc);
                }
            }
            Op::ChannelMul(x, c) => {
                let xv = self.value(*x);
                let cv = self.value(*c).data();
                let (n, ch, s) = dy.channel_split();
                if want(x) {
                    let mut dx = dy.clone();
                    for b in 0..n {
                        for (k, &c) in cv.iter().enumerate().take(ch) {
                            for v in &mut dx.data_mut()[(b * ch + k) * s..(b * ch + k + 1) * s] {
                                *v *= c;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if want(c) {
                    let mut dc = Tensor::zeros(&[ch]);
                    for b in 0..n {
                        for k in 0..ch {
                            let r = (b * ch + k) * s..(b * ch + k + 1) * s;
                            let part: T = dy.data()[r.clone()]
                                .iter()
                                .zip(&xv.data()[r])
                                .map(|(&g, &v)| g * v)
                                .sum();
                            dc.data_mut()[k] += part;
                        }
                    }
                    accumulate(grads, *c, dc);
                }
            }
            Op::ChannelMean(x) => {
                let xv = self.value(*x);
                let (n, ch, s) = xv.channel_split();
                let inv = T::one() / T::from_f64((n * s) as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for b in 0..n {
                    for k in 0..ch {
                        let g = dy.data()[k] * inv;
                        dx.data_mut()[(b * ch + k) * s..(b * ch + k + 1) * s].fill(g);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                accumulate(grads, *a, dy.zip_map(self.value(*a), |g, x| g * two * x));
            }
            Op::Rsqrt(a) => {
                let half = T::from_f64(0.5);
                accumulate(grads, *a, dy.zip_map(y, |g, r| -half * g * r * r * r));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                accumulate(
                    grads,
                    *a,
                    dy.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { g * slope }),
                );
            }
            Op::Relu(a) => {
                accumulate(
                    grads,
                    *a,
                    dy.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() }),
                );
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, dy.zip_map(y, |g, t| g * (T::one() - t * t)));
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, dy.zip_map(y, |g, s| g * s * (T::one() - s)));
            }
            Op::Ln(a) => {
                accumulate(grads, *a, dy.zip_map(self.value(*a), |g, x| g / x));
            }
            Op::Abs(a) => {
                accumulate(
                    grads,
                    *a,
                    dy.zip_map(self.value(*a), |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                accumulate(
                    grads,
                    *a,
                    dy.zip_map(self.value(*a), |g, x| if x >= lo && x <= hi { g } else { T::zero() }),
                );
            }
            Op::MaskMul(a, m) => {
                accumulate(grads, *a, dy.zip_map(m, |g, m| g * m));
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a).to_vec();
                let mut dx = Tensor::zeros(&s);
                kernels::upsample2x_backward(dy.data(), s[0] * s[1], [s[2], s[3], s[4]], dx.data_mut());
                accumulate(grads, *a, dx);
            }
            Op::SampleSum(a) => {
                let xv = self.value(*a);
                let (_, per) = xv.batch_split();
                let dx = Tensor::from_fn(xv.shape(), |i| dy.data()[i / per]);
                accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let g = dy.item();
                accumulate(grads, *a, Tensor::full(self.shape(*a), g));
            }
            Op::Mean(a) => {
                let xv = self.value(*a);
                let g = dy.item() / T::from_f64(xv.numel() as f64);
                accumulate(grads, *a, Tensor::full(xv.shape(), g));
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
