//! Define-by-run reverse-mode autodiff over dynamic-dimension `ndarray`
//! tensors. Ops are coarse (one node per conv / matmul / activation), so the
//! tape overhead is negligible next to the GEMMs.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix4, IxDyn, Slice};

use super::conv::{col2im, conv_out, conv_transpose_out, im2col, par_matmul};
use super::{ParamId, ParamStore, Real};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddScalar(Var, S),
    AddBias { x: Var, b: Var },
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    LeakyRelu(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    SqrtEps(Var, S),
    Abs(Var),
    Clamp01(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Concat(Var, Var, usize),
    Slice { x: Var, axis: usize, from: usize, to: usize },
    RowScale { x: Var, s: Var },
    DivScalarVar { x: Var, s: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: ArrayD<S>, inv_std: Vec<S> },
}

pub struct Tape<S: Real> {
    values: Vec<ArrayD<S>>,
    ops: Vec<Op<S>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn scalar(&self, v: Var) -> S {
        let val = &self.values[v.0];
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        let n = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        let n = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), n)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        let n = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), n)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] / &self.values[b.0];
        let n = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), n)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| -x);
        let n = self.needs(a);
        self.push(v, Op::Neg(a), n)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let v = self.values[a.0].mapv(|x| x * k);
        let n = self.needs(a);
        self.push(v, Op::Scale(a, k), n)
    }

    pub fn add_scalar(&mut self, a: Var, k: S) -> Var {
        let v = self.values[a.0].mapv(|x| x + k);
        let n = self.needs(a);
        self.push(v, Op::AddScalar(a, k), n)
    }

    /// Broadcast-add a `[C]` bias over `[B,C]` or `[B,C,H,W]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.values[x.0];
        let bv = self.values[b.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-d");
        let mut out = xv.clone();
        match xv.ndim() {
            2 => {
                for mut row in out.view_mut().into_dimensionality::<Ix2>().unwrap().rows_mut() {
                    row.zip_mut_with(&bv, |r, &bb| *r = *r + bb);
                }
            }
            4 => {
                let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
                for (c, &bb) in bv.iter().enumerate() {
                    o4.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bb);
                }
            }
            d => panic!("add_bias on {d}-d tensor"),
        }
        let n = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias { x, b }, n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
        let y = par_matmul(av, bv).into_dyn();
        let n = self.needs(a) || self.needs(b);
        self.push(y, Op::Matmul(a, b), n)
    }

    /// `x: [B,C,H,W]`, `w: [O,C,K,K]`, optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.values[w.0].view().into_dimensionality::<Ix4>().unwrap();
        let (batch, _c, h, wd) = xv.dim();
        let (o, c2, k, _) = wv.dim();
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(wd, k, stride, pad);
        let cols = im2col(xv, k, stride, pad);
        let w_mat = wv.into_shape_with_order((o, c2 * k * k)).unwrap();
        // [B*OH*OW, O]
        let y_rows = par_matmul(cols.view(), w_mat.t());
        let mut y = y_rows
            .into_shape_with_order((batch, oh, ow, o))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        if let Some(bias) = b {
            let bv = self.values[bias.0].view().into_dimensionality::<Ix1>().unwrap();
            let mut y4 = y.view_mut().into_dimensionality::<Ix4>().unwrap();
            for (ci, &bb) in bv.iter().enumerate() {
                y4.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v + bb);
            }
        }
        let n = self.needs(x) || self.needs(w) || b.map_or(false, |bb| self.needs(bb));
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, n)
    }

    /// Transposed convolution. `x: [B,C,H,W]`, `w: [C,O,K,K]`, bias `[O]`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.values[w.0].view().into_dimensionality::<Ix4>().unwrap();
        let (batch, c, h, wd) = xv.dim();
        let (_c2, o, k, _) = wv.dim();
        let oh = conv_transpose_out(h, k, stride, pad);
        let ow = conv_transpose_out(wd, k, stride, pad);
        // Rows ordered (b, h, w) to match im2col of the output-side geometry.
        let x_mat = xv
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape_with_order((batch * h * wd, c))
            .unwrap()
            .to_owned();
        let w_mat = wv.into_shape_with_order((c, o * k * k)).unwrap();
        let cols = par_matmul(x_mat.view(), w_mat);
        let mut y = col2im(cols.view(), batch, o, oh, ow, k, stride, pad).into_dyn();
        if let Some(bias) = b {
            let bv = self.values[bias.0].view().into_dimensionality::<Ix1>().unwrap();
            let mut y4 = y.view_mut().into_dimensionality::<Ix4>().unwrap();
            for (ci, &bb) in bv.iter().enumerate() {
                y4.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v + bb);
            }
        }
        let n = self.needs(x) || self.needs(w) || b.map_or(false, |bb| self.needs(bb));
        self.push(y, Op::ConvT2d { x, w, b, stride, pad }, n)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let v = self.values[a.0].mapv(|x| if x > S::zero() { x } else { x * slope });
        let n = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, S::zero())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.tanh());
        let n = self.needs(a);
        self.push(v, Op::Tanh(a), n)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = S::one();
        let v = self.values[a.0].mapv(|x| one / (one + (-x).exp()));
        let n = self.needs(a);
        self.push(v, Op::Sigmoid(a), n)
    }

    /// Numerically stable `ln(1+e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(stable_softplus);
        let n = self.needs(a);
        self.push(v, Op::Softplus(a), n)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.exp());
        let n = self.needs(a);
        self.push(v, Op::Exp(a), n)
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.ln());
        let n = self.needs(a);
        self.push(v, Op::Ln(a), n)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x * x);
        let n = self.needs(a);
        self.push(v, Op::Square(a), n)
    }

    pub fn sqrt_eps(&mut self, a: Var, eps: S) -> Var {
        let v = self.values[a.0].mapv(|x| (x + eps).sqrt());
        let n = self.needs(a);
        self.push(v, Op::SqrtEps(a, eps), n)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.abs());
        let n = self.needs(a);
        self.push(v, Op::Abs(a), n)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let (zero, one) = (S::zero(), S::one());
        let v = self.values[a.0].mapv(|x| {
            if x < zero {
                zero
            } else if x > one {
                one
            } else {
                x
            }
        });
        let n = self.needs(a);
        self.push(v, Op::Clamp01(a), n)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ndarray::arr0(self.values[a.0].sum()).into_dyn();
        let n = self.needs(a);
        self.push(v, Op::SumAll(a), n)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let count = S::from_f64(self.values[a.0].len() as f64);
        let v = ndarray::arr0(self.values[a.0].sum() / count).into_dyn();
        let n = self.needs(a);
        self.push(v, Op::MeanAll(a), n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.values[a.0].sum_axis(Axis(axis));
        let n = self.needs(a);
        self.push(v, Op::SumAxis(a, axis), n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.values[a.0]
            .view()
            .as_standard_layout()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        let n = self.needs(a);
        self.push(v, Op::Reshape(a), n)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let v = ndarray::concatenate(
            Axis(axis),
            &[self.values[a.0].view(), self.values[b.0].view()],
        )
        .expect("concat shape mismatch");
        let n = self.needs(a) || self.needs(b);
        self.push(v, Op::Concat(a, b, axis), n)
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, from: usize, to: usize) -> Var {
        let v = self.values[x.0]
            .slice_axis(Axis(axis), Slice::from(from..to))
            .to_owned();
        let n = self.needs(x);
        self.push(v, Op::Slice { x, axis, from, to }, n)
    }

    /// Multiply each row `x[i,:]` of a `[B,N]` tensor by scalar `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix2>().unwrap();
        let sv = self.values[s.0].view().into_dimensionality::<Ix1>().unwrap();
        let mut out = xv.to_owned();
        for (mut row, &k) in out.rows_mut().into_iter().zip(sv.iter()) {
            row.mapv_inplace(|v| v * k);
        }
        let n = self.needs(x) || self.needs(s);
        self.push(out.into_dyn(), Op::RowScale { x, s }, n)
    }

    /// Divide a tensor by a single-element variable.
    pub fn div_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.values[x.0].mapv(|v| v / k);
        let n = self.needs(x) || self.needs(s);
        self.push(v, Op::DivScalarVar { x, s }, n)
    }

    /// Batch normalization over `[B,C]` or `[B,C,H,W]` with batch statistics
    /// (training mode). Returns the output plus per-channel (mean, var) for
    /// running-average upkeep.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> (Var, Vec<S>, Vec<S>) {
        let xv = &self.values[x.0];
        let channels = xv.shape()[1];
        let mut mean = vec![S::zero(); channels];
        let mut var = vec![S::zero(); channels];
        for c in 0..channels {
            let lane = xv.index_axis(Axis(1), c);
            let n = S::from_f64(lane.len() as f64);
            let m = lane.sum() / n;
            let v = lane.fold(S::zero(), |acc, &x| acc + (x - m) * (x - m)) / n;
            mean[c] = m;
            var[c] = v;
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for c in 0..channels {
            let (m, is) = (mean[c], inv_std[c]);
            xhat.index_axis_mut(Axis(1), c)
                .mapv_inplace(|v| (v - m) * is);
        }
        let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.values[beta.0].view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xhat.clone();
        for c in 0..channels {
            let (g, b) = (gv[c], bv[c]);
            y.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * g + b);
        }
        let n = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.clone(),
            },
            n,
        );
        (out, mean, var)
    }

    /// Normalization with given (running) statistics: inference mode.
    /// Gradients flow to `x` only; gamma/beta enter as folded constants.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        var: &[S],
        eps: S,
    ) -> Var {
        let shape: Vec<usize> = self.values[x.0].shape().to_vec();
        let channels = shape[1];
        let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.values[beta.0].view().into_dimensionality::<Ix1>().unwrap();
        let mut scale = ArrayD::<S>::zeros(IxDyn(&shape));
        let mut shift = ArrayD::<S>::zeros(IxDyn(&shape));
        for c in 0..channels {
            let k = gv[c] / (var[c] + eps).sqrt();
            scale.index_axis_mut(Axis(1), c).fill(k);
            shift.index_axis_mut(Axis(1), c).fill(bv[c] - mean[c] * k);
        }
        let scale_v = self.constant(scale);
        let shift_v = self.constant(shift);
        let scaled = self.mul(x, scale_v);
        self.add(scaled, shift_v)
    }

    /// Reverse pass from a single-element loss node.
    pub fn backward(&mut self, loss: Var) {
        debug_assert_eq!(self.values[loss.0].len(), 1);
        for g in self.grads.iter_mut() {
            *g = None;
        }
        let shape = self.values[loss.0].raw_dim();
        self.grads[loss.0] = Some(ArrayD::ones(shape));
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
    }

    fn accum(&mut self, v: Var, delta: ArrayD<S>) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, i: usize, dy: &ArrayD<S>) {
        // Ops are moved out temporarily to appease the borrow checker.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(*a, dy.clone());
                self.accum(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accum(*a, dy.clone());
                self.accum(*b, dy.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = dy * &self.values[b.0];
                let db = dy * &self.values[a.0];
                self.accum(*a, da);
                self.accum(*b, db);
            }
            Op::Div(a, b) => {
                let bv = &self.values[b.0];
                let da = dy / bv;
                let db = -(dy * &self.values[a.0]) / (bv * bv);
                self.accum(*a, da);
                self.accum(*b, db);
            }
            Op::Neg(a) => self.accum(*a, dy.mapv(|x| -x)),
            Op::Scale(a, k) => self.accum(*a, dy.mapv(|x| x * *k)),
            Op::AddScalar(a, _) => self.accum(*a, dy.clone()),
            Op::AddBias { x, b } => {
                self.accum(*x, dy.clone());
                let db = sum_to_channel(dy);
                self.accum(*b, db);
            }
            Op::Matmul(a, b) => {
                let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
                let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                let da = par_matmul(dyv, bv.t()).into_dyn();
                let db = par_matmul(av.t(), dyv).into_dyn();
                self.accum(*a, da);
                self.accum(*b, db);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.backprop_conv(*x, *w, *b, *stride, *pad, dy);
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                self.backprop_conv_transpose(*x, *w, *b, *stride, *pad, dy);
            }
            Op::LeakyRelu(a, slope) => {
                let xin = &self.values[a.0];
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(xin).for_each(|d, &x| {
                    if x <= S::zero() {
                        *d = *d * *slope;
                    }
                });
                self.accum(*a, dx);
            }
            Op::Tanh(a) => {
                let y = &self.values[i];
                let dx = dy * &y.mapv(|t| S::one() - t * t);
                self.accum(*a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.values[i];
                let dx = dy * &y.mapv(|s| s * (S::one() - s));
                self.accum(*a, dx);
            }
            Op::Softplus(a) => {
                let xin = &self.values[a.0];
                let one = S::one();
                let dx = dy * &xin.mapv(|x| one / (one + (-x).exp()));
                self.accum(*a, dx);
            }
            Op::Exp(a) => {
                let dx = dy * &self.values[i];
                self.accum(*a, dx);
            }
            Op::Ln(a) => {
                let dx = dy / &self.values[a.0];
                self.accum(*a, dx);
            }
            Op::Square(a) => {
                let two = S::from_f64(2.0);
                let dx = dy * &self.values[a.0].mapv(|x| x * two);
                self.accum(*a, dx);
            }
            Op::SqrtEps(a, _) => {
                let half = S::from_f64(0.5);
                let y = &self.values[i];
                let dx = dy * &y.mapv(|s| half / s);
                self.accum(*a, dx);
            }
            Op::Abs(a) => {
                let xin = &self.values[a.0];
                let dx = dy
                    * &xin.mapv(|x| {
                        if x > S::zero() {
                            S::one()
                        } else if x < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        }
                    });
                self.accum(*a, dx);
            }
            Op::Clamp01(a) => {
                let xin = &self.values[a.0];
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(xin).for_each(|d, &x| {
                    if x < S::zero() || x > S::one() {
                        *d = S::zero();
                    }
                });
                self.accum(*a, dx);
            }
            Op::SumAll(a) => {
                let g = self.grad_scalar(dy);
                let shape = self.values[a.0].raw_dim();
                self.accum(*a, ArrayD::from_elem(shape, g));
            }
            Op::MeanAll(a) => {
                let count = S::from_f64(self.values[a.0].len() as f64);
                let g = self.grad_scalar(dy) / count;
                let shape = self.values[a.0].raw_dim();
                self.accum(*a, ArrayD::from_elem(shape, g));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.values[a.0].raw_dim();
                let expanded = dy.clone().insert_axis(Axis(*axis));
                let dx = expanded.broadcast(shape.clone()).unwrap().to_owned();
                self.accum(*a, dx);
            }
            Op::Reshape(a) => {
                let shape: Vec<usize> = self.values[a.0].shape().to_vec();
                let dx = dy
                    .view()
                    .as_standard_layout()
                    .into_shape_with_order(IxDyn(&shape))
                    .unwrap()
                    .to_owned();
                self.accum(*a, dx);
            }
            Op::Concat(a, b, axis) => {
                let asz = self.values[a.0].shape()[*axis];
                let da = dy
                    .slice_axis(Axis(*axis), Slice::from(0..asz))
                    .to_owned();
                let total = dy.shape()[*axis];
                let db = dy
                    .slice_axis(Axis(*axis), Slice::from(asz..total))
                    .to_owned();
                self.accum(*a, da);
                self.accum(*b, db);
            }
            Op::Slice { x, axis, from, to } => {
                let shape = self.values[x.0].raw_dim();
                let mut dx = ArrayD::zeros(shape);
                dx.slice_axis_mut(Axis(*axis), Slice::from(*from..*to))
                    .assign(dy);
                self.accum(*x, dx);
            }
            Op::RowScale { x, s } => {
                let xv = self.values[x.0].view().into_dimensionality::<Ix2>().unwrap();
                let sv = self.values[s.0].view().into_dimensionality::<Ix1>().unwrap();
                let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = dyv.to_owned();
                for (mut row, &k) in dx.rows_mut().into_iter().zip(sv.iter()) {
                    row.mapv_inplace(|v| v * k);
                }
                let ds: ndarray::Array1<S> = dyv
                    .rows()
                    .into_iter()
                    .zip(xv.rows())
                    .map(|(dr, xr)| dr.iter().zip(xr.iter()).fold(S::zero(), |acc, (&d, &x)| acc + d * x))
                    .collect();
                self.accum(*x, dx.into_dyn());
                self.accum(*s, ds.into_dyn());
            }
            Op::DivScalarVar { x, s } => {
                let k = self.scalar(*s);
                let dx = dy.mapv(|d| d / k);
                let xv = &self.values[x.0];
                let num = ndarray::Zip::from(dy)
                    .and(xv)
                    .fold(S::zero(), |acc, &d, &x| acc + d * x);
                let ds = ArrayD::from_elem(self.values[s.0].raw_dim(), -num / (k * k));
                self.accum(*x, dx);
                self.accum(*s, ds);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let channels = xhat.shape()[1];
                let gv = self.values[gamma.0]
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                let mut dgamma = ndarray::Array1::<S>::zeros(channels);
                let mut dbeta = ndarray::Array1::<S>::zeros(channels);
                let mut dx = xhat.clone();
                for c in 0..channels {
                    let dyc = dy.index_axis(Axis(1), c);
                    let xc = xhat.index_axis(Axis(1), c);
                    let n = S::from_f64(dyc.len() as f64);
                    let sum_dy = dyc.sum();
                    let sum_dy_xhat =
                        ndarray::Zip::from(&dyc).and(&xc).fold(S::zero(), |acc, &d, &h| acc + d * h);
                    dgamma[c] = sum_dy_xhat;
                    dbeta[c] = sum_dy;
                    let coef = gv[c] * inv_std[c];
                    let mean_dy = sum_dy / n;
                    let mean_dy_xhat = sum_dy_xhat / n;
                    let mut dxc = dx.index_axis_mut(Axis(1), c);
                    ndarray::Zip::from(&mut dxc)
                        .and(&dyc)
                        .for_each(|slot, &d| {
                            let h = *slot; // xhat value
                            *slot = coef * (d - mean_dy - h * mean_dy_xhat);
                        });
                }
                self.accum(*x, dx);
                self.accum(*gamma, dgamma.into_dyn());
                self.accum(*beta, dbeta.into_dyn());
            }
        }
        self.ops[i] = op;
    }

    fn grad_scalar(&self, dy: &ArrayD<S>) -> S {
        debug_assert_eq!(dy.len(), 1);
        *dy.iter().next().unwrap()
    }

    fn backprop_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dy: &ArrayD<S>,
    ) {
        let (dw, dx) = {
            let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
            let wv = self.values[w.0].view().into_dimensionality::<Ix4>().unwrap();
            let (batch, c, h, wd) = xv.dim();
            let (o, _c2, k, _) = wv.dim();
            let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
            let (_, _, oh, ow) = dy4.dim();
            // [B*OH*OW, O]
            let dy_rows = dy4
                .permuted_axes([0, 2, 3, 1])
                .as_standard_layout()
                .into_shape_with_order((batch * oh * ow, o))
                .unwrap()
                .to_owned();
            let w_mat = wv.into_shape_with_order((o, c * k * k)).unwrap();
            let dw = if self.needs_grad[w.0] {
                let cols = im2col(xv, k, stride, pad);
                Some(
                    par_matmul(dy_rows.t(), cols.view())
                        .into_shape_with_order((o, c, k, k))
                        .unwrap()
                        .into_dyn(),
                )
            } else {
                None
            };
            let dx = if self.needs_grad[x.0] {
                let dcols = par_matmul(dy_rows.view(), w_mat);
                Some(col2im(dcols.view(), batch, c, h, wd, k, stride, pad).into_dyn())
            } else {
                None
            };
            (dw, dx)
        };
        if let Some(dw) = dw {
            self.accum(w, dw);
        }
        if let Some(dx) = dx {
            self.accum(x, dx);
        }
        if let Some(bias) = b {
            if self.needs_grad[bias.0] {
                let db = sum_to_channel(dy);
                self.accum(bias, db);
            }
        }
    }

    fn backprop_conv_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dy: &ArrayD<S>,
    ) {
        let (dx, dw) = {
            let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
            let wv = self.values[w.0].view().into_dimensionality::<Ix4>().unwrap();
            let (batch, c, h, wd) = xv.dim();
            let (_c2, o, k, _) = wv.dim();
            let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
            // The forward scattered x rows into dy geometry; the backward gathers.
            let dy_cols = im2col(dy4, k, stride, pad); // [B*H*W, O*K*K]
            let w_mat = wv.into_shape_with_order((c, o * k * k)).unwrap();
            let dx = if self.needs_grad[x.0] {
                let dx_rows = par_matmul(dy_cols.view(), w_mat.t()); // [B*H*W, C]
                Some(
                    dx_rows
                        .into_shape_with_order((batch, h, wd, c))
                        .unwrap()
                        .permuted_axes([0, 3, 1, 2])
                        .as_standard_layout()
                        .to_owned()
                        .into_dyn(),
                )
            } else {
                None
            };
            let dw = if self.needs_grad[w.0] {
                let x_mat = xv
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .into_shape_with_order((batch * h * wd, c))
                    .unwrap()
                    .to_owned();
                Some(
                    par_matmul(x_mat.t(), dy_cols.view())
                        .into_shape_with_order((c, o, k, k))
                        .unwrap()
                        .into_dyn(),
                )
            } else {
                None
            };
            (dx, dw)
        };
        if let Some(dx) = dx {
            self.accum(x, dx);
        }
        if let Some(dw) = dw {
            self.accum(w, dw);
        }
        if let Some(bias) = b {
            if self.needs_grad[bias.0] {
                let db = sum_to_channel(dy);
                self.accum(bias, db);
            }
        }
    }
}

/// Sum a `[B,C]` or `[B,C,H,W]` tensor down to `[C]`.
fn sum_to_channel<S: Real>(dy: &ArrayD<S>) -> ArrayD<S> {
    let channels = dy.shape()[1];
    let mut out = ndarray::Array1::<S>::zeros(channels);
    for c in 0..channels {
        out[c] = dy.index_axis(Axis(1), c).sum();
    }
    out.into_dyn()
}

fn stable_softplus<S: Real>(x: S) -> S {
    let zero = S::zero();
    if x > zero {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// A tape plus parameter staging: each parameter is placed on the tape at
/// most once per session, so its gradient accumulates across every use. The
/// session does not borrow the store; callers pass it per staging call.
pub struct Session<S: Real> {
    pub tape: Tape<S>,
    staged: Vec<Option<Var>>,
    /// Parameter ids staged as constants (frozen side of an adversarial pair).
    frozen: std::collections::HashSet<usize>,
}

impl<S: Real> Session<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        Session {
            tape: Tape::new(),
            staged: vec![None; store.len()],
            frozen: std::collections::HashSet::new(),
        }
    }

    /// Mark parameters to be staged as constants in this session.
    pub fn freeze(&mut self, ids: &[ParamId]) {
        self.frozen.extend(ids.iter().map(|id| id.0));
    }

    /// Stage a parameter as a trainable leaf (or constant when frozen).
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(v) = self.staged[id.0] {
            return v;
        }
        let v = if self.frozen.contains(&id.0) {
            self.tape.constant(store.get(id).clone())
        } else {
            self.tape.leaf(store.get(id).clone())
        };
        self.staged[id.0] = Some(v);
        v
    }

    pub fn grad_of(&self, id: ParamId) -> Option<&ArrayD<S>> {
        self.staged
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.tape.grad(v))
    }

    pub fn input(&mut self, value: ArrayD<S>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, S> {
        self.tape.value(v).view()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr0, Array, Array1, Array2, Array4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences through an arbitrary scalar-valued builder.
    fn fd_check(
        shapes: &[&[usize]],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss);
        let grads: Vec<ArrayD<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| ArrayD::zeros(tape.value(v).raw_dim())))
            .collect();

        let eval = |xs: &[ArrayD<f64>]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let l = build(&mut t, &vs);
            t.scalar(l)
        };

        let h = 1e-5;
        for (pi, inp) in inputs.iter().enumerate() {
            for idx in 0..inp.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[pi].as_slice_mut().unwrap()[idx] += h;
                minus[pi].as_slice_mut().unwrap()[idx] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = grads[pi].as_slice().unwrap()[idx];
                let denom = ana.abs().max(num.abs()).max(1e-6);
                assert!(
                    (ana - num).abs() / denom < 1e-5,
                    "param {pi} elem {idx}: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn elementwise_op_gradients() {
        fd_check(&[&[3, 4], &[3, 4]], |t, v| {
            let a = t.mul(v[0], v[1]);
            let b = t.tanh(a);
            let c = t.sigmoid(b);
            let d = t.softplus(c);
            let e = t.square(d);
            let f = t.abs(e);
            t.mean_all(f)
        }, 1);

        fd_check(&[&[2, 3]], |t, v| {
            let a = t.scale(v[0], 0.7);
            let b = t.add_scalar(a, 0.3);
            let c = t.exp(b);
            let d = t.ln(c);
            let sq = t.square(d);
            let e = t.sqrt_eps(sq, 1e-9);
            t.sum_all(e)
        }, 2);

        fd_check(&[&[4, 2], &[4, 2]], |t, v| {
            // Keep divisors away from zero.
            let s = t.sigmoid(v[1]);
            let denom = t.add_scalar(s, 1.0);
            let d = t.div(v[0], denom);
            let l = t.leaky_relu(d, 0.2);
            t.mean_all(l)
        }, 3);
    }

    #[test]
    fn matmul_bias_gradients() {
        fd_check(&[&[3, 4], &[4, 2], &[2]], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.add_bias(y, v[2]);
            let y = t.tanh(y);
            t.mean_all(y)
        }, 4);
    }

    #[test]
    fn reduction_and_shape_gradients() {
        fd_check(&[&[3, 4]], |t, v| {
            let s = t.sum_axis(v[0], 1);
            let q = t.square(s);
            t.mean_all(q)
        }, 5);

        fd_check(&[&[2, 6]], |t, v| {
            let r = t.reshape(v[0], &[3, 4]);
            let sl = t.slice_axis(r, 1, 1, 3);
            t.sum_all(sl)
        }, 6);

        fd_check(&[&[2, 3], &[2, 2]], |t, v| {
            let c = t.concat(v[0], v[1], 1);
            let sq = t.square(c);
            t.mean_all(sq)
        }, 7);

        fd_check(&[&[3, 4], &[3]], |t, v| {
            let abs_s = t.abs(v[1]);
            let s = t.add_scalar(abs_s, 0.5);
            let y = t.row_scale(v[0], s);
            t.mean_all(y)
        }, 8);

        fd_check(&[&[3, 3], &[1]], |t, v| {
            let sq = t.square(v[1]);
            let s = t.add_scalar(sq, 0.5);
            let y = t.div_scalar_var(v[0], s);
            t.mean_all(y)
        }, 9);
    }

    #[test]
    fn conv_gradients() {
        fd_check(&[&[2, 2, 6, 6], &[3, 2, 4, 4], &[3]], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1);
            let y = t.leaky_relu(y, 0.2);
            t.mean_all(y)
        }, 10);
    }

    #[test]
    fn conv_transpose_gradients() {
        fd_check(&[&[2, 3, 3, 3], &[3, 2, 4, 4], &[2]], |t, v| {
            let y = t.conv2d_transpose(v[0], v[1], Some(v[2]), 2, 1);
            let y = t.tanh(y);
            t.mean_all(y)
        }, 11);
    }

    #[test]
    fn batch_norm_gradients() {
        fd_check(&[&[4, 3], &[3], &[3]], |t, v| {
            let (y, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5);
            let y = t.square(y);
            t.mean_all(y)
        }, 12);

        fd_check(&[&[2, 2, 3, 3], &[2], &[2]], |t, v| {
            let (y, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5);
            let y = t.tanh(y);
            t.mean_all(y)
        }, 13);
    }

    #[test]
    fn conv_matches_transpose_adjoint() {
        // <conv(x), y> == <x, convT(y)> with tied weights.
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(-1.0..1.0f64));
        let w = Array4::from_shape_fn((4, 3, 4, 4), |_| rng.gen_range(-1.0..1.0f64));
        let y = Array4::from_shape_fn((2, 4, 4, 4), |_| rng.gen_range(-1.0..1.0f64));

        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone().into_dyn());
        let wv = t.constant(w.clone().into_dyn());
        let conv = t.conv2d(xv, wv, None, 2, 1);
        let lhs = (t.value(conv) * &y.clone().into_dyn()).sum();

        // convT weights are [C_in, C_out, k, k] = w viewed from the other side.
        let wt = w.permuted_axes([0, 1, 2, 3]); // [O=4, C=3, 4, 4]
        let mut t2 = Tape::<f64>::new();
        let yv = t2.constant(y.into_dyn());
        let wtv = t2.constant(wt.into_dyn());
        let back = t2.conv2d_transpose(yv, wtv, None, 2, 1);
        let rhs = (t2.value(back) * &x.into_dyn()).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn clamp_passes_gradient_inside_only() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Array1::from(vec![-0.5, 0.5, 1.5]).into_dyn());
        let y = t.clamp01(x);
        let l = t.sum_all(y);
        t.backward(l);
        let g = t.grad(x).unwrap();
        assert_eq!(g.as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn session_accumulates_shared_params() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Array2::from_elem((2, 2), 0.5).into_dyn());
        let mut sess = Session::new(&store);
        let w = sess.param(&store, id);
        let w_again = sess.param(&store, id);
        assert_eq!(w, w_again);
        let x = sess.input(Array2::from_elem((2, 2), 1.0).into_dyn());
        let a = sess.tape.mul(w, x);
        let b = sess.tape.mul(w, a); // w used twice
        let l = sess.tape.sum_all(b);
        sess.tape.backward(l);
        // d/dw of sum(w^2 * x) = 2*w*x = 1.0 each.
        let g = sess.grad_of(id).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn scalar_helper() {
        let mut t = Tape::<f64>::new();
        let v = t.constant(arr0(3.25).into_dyn());
        assert_eq!(t.scalar(v), 3.25);
        let arr: Array<f64, _> = Array::zeros((2, 2));
        let c = t.constant(arr.into_dyn());
        assert_eq!(t.value(c).len(), 4);
    }
}
