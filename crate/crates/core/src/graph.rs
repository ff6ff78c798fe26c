//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes in
//! topological order; [`Graph::backward`] walks it in reverse and returns
//! gradients for trainable parameter leaves. One graph serves one
//! optimization half-step and is dropped afterwards.
//!
//! Frozen networks (a feature backbone, the discriminator during a
//! generator update) enter as plain constants: gradients still flow
//! *through* their ops to earlier inputs, but no parameter gradient is
//! produced for them. The same code runs in `f32` for training and `f64`
//! for the finite-difference verification suite.

use std::collections::BTreeMap;

use crate::kernels;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf {
        param: Option<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<T>,
        inv_std: Tensor<T>,
    },
    AvgPool {
        x: Var,
        spatial: usize,
    },
    Upsample2x3d {
        x: Var,
    },
    Replicate {
        x: Var,
        pos: usize,
    },
    PermuteSpatial {
        x: Var,
        perm: [usize; 3],
    },
    ConcatChannels {
        xs: Vec<Var>,
    },
    CropSpatial {
        x: Var,
        offsets: [usize; 3],
    },
    Reshape {
        x: Var,
    },
    MeanSpatialAxis {
        x: Var,
        axis: usize,
    },
    MeanAll {
        x: Var,
    },
    MseLoss {
        a: Var,
        b: Var,
    },
    MaeLoss {
        a: Var,
        b: Var,
    },
    HuberLoss {
        a: Var,
        b: Var,
        delta: f64,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Parameter gradients keyed by the index passed to [`Graph::param`],
/// plus any explicitly retained node gradients.
pub struct Grads<T: Scalar> {
    pub by_param: BTreeMap<usize, Tensor<T>>,
    retained: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn retained(&self, v: Var) -> Option<&Tensor<T>> {
        self.retained.get(&v.0)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf with no gradient: inputs, targets, frozen weights.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Trainable parameter leaf; `index` keys the returned gradient.
    pub fn param(&mut self, t: &Tensor<T>, index: usize) -> Var {
        self.push(t.clone(), Op::Leaf { param: Some(index) }, true)
    }

    /// Non-parameter leaf that still accumulates a gradient (for tests and
    /// input-sensitivity probes); retrieve it via `backward_retaining`.
    pub fn differentiable_input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let v = self.value(a).map(|x| x * f);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, factor), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let v = self.value(a).map(|x| if x > T::ZERO { x } else { x * s });
        let ng = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.maximum(T::ZERO));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let v = kernels::conv2d_fwd(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let v = kernels::conv3d_fwd(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            v,
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Per-sample, per-channel normalization over all spatial positions
    /// with learned affine parameters (one scale/shift per channel).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = 1e-5;
        let xs = self.value(x);
        let shape = xs.shape().to_vec();
        assert!(shape.len() >= 3, "instance_norm expects (N, C, spatial...)");
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let mut mean = Tensor::zeros(&[n * c]);
        let mut inv_std = Tensor::zeros(&[n * c]);
        let mut out = Tensor::zeros(&shape);
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        for i in 0..n * c {
            let xg = &xs.data()[i * s..(i + 1) * s];
            let mut mu = T::ZERO;
            for &v in xg {
                mu = mu + v;
            }
            mu = mu * T::from_f64(1.0 / s as f64);
            let mut var = T::ZERO;
            for &v in xg {
                let d = v - mu;
                var = var + d * d;
            }
            var = var * T::from_f64(1.0 / s as f64);
            let istd = T::ONE / (var + T::from_f64(eps)).sqrt();
            mean.data_mut()[i] = mu;
            inv_std.data_mut()[i] = istd;
            let (gc, bc) = (g[i % c], bt[i % c]);
            for (o, &v) in out.data_mut()[i * s..(i + 1) * s].iter_mut().zip(xg) {
                *o = gc * ((v - mu) * istd) + bc;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            ng,
        )
    }

    pub fn avg_pool(&mut self, x: Var, spatial: usize, factor: usize) -> Var {
        let v = kernels::avg_pool(self.value(x), spatial, factor);
        let ng = self.needs(x);
        self.push(v, Op::AvgPool { x, spatial }, ng)
    }

    pub fn upsample2x_3d(&mut self, x: Var) -> Var {
        let v = kernels::upsample2x_3d(self.value(x));
        let ng = self.needs(x);
        self.push(v, Op::Upsample2x3d { x }, ng)
    }

    pub fn replicate_spatial(&mut self, x: Var, pos: usize, copies: usize) -> Var {
        let v = kernels::replicate_spatial(self.value(x), pos, copies);
        let ng = self.needs(x);
        self.push(v, Op::Replicate { x, pos }, ng)
    }

    pub fn permute_spatial(&mut self, x: Var, perm: [usize; 3]) -> Var {
        let v = kernels::permute_spatial(self.value(x), perm);
        let ng = self.needs(x);
        self.push(v, Op::PermuteSpatial { x, perm }, ng)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let first = self.value(xs[0]).shape().to_vec();
        let mut c_total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            assert_eq!(s[0], first[0], "concat batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat spatial mismatch");
            c_total += s[1];
        }
        let n = first[0];
        let sp: usize = first[2..].iter().product();
        let mut shape = first.clone();
        shape[1] = c_total;
        let mut out = Tensor::zeros(&shape);
        let mut c_off = 0;
        for &v in xs {
            let t = self.value(v);
            let c = t.shape()[1];
            for ni in 0..n {
                let src = &t.data()[ni * c * sp..(ni + 1) * c * sp];
                let dst_start = (ni * c_total + c_off) * sp;
                out.data_mut()[dst_start..dst_start + c * sp].copy_from_slice(src);
            }
            c_off += c;
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(out, Op::ConcatChannels { xs: xs.to_vec() }, ng)
    }

    pub fn crop_spatial(&mut self, x: Var, offsets: [usize; 3], extent: [usize; 3]) -> Var {
        let v = kernels::crop_spatial(self.value(x), offsets, extent);
        let ng = self.needs(x);
        self.push(v, Op::CropSpatial { x, offsets }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).reshaped(shape);
        let ng = self.needs(x);
        self.push(v, Op::Reshape { x }, ng)
    }

    pub fn mean_spatial_axis(&mut self, x: Var, axis: usize) -> Var {
        let v = kernels::mean_spatial_axis(self.value(x), axis);
        let ng = self.needs(x);
        self.push(v, Op::MeanSpatialAxis { x, axis }, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(T::from_f64(self.value(x).mean_f64()));
        let ng = self.needs(x);
        self.push(v, Op::MeanAll { x }, ng)
    }

    /// Mean squared difference over all elements (scalar).
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse_loss shape mismatch");
        let mut acc = 0.0;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = (x - y).to_f64();
            acc += d * d;
        }
        let v = Tensor::scalar(T::from_f64(acc / ta.len() as f64));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MseLoss { a, b }, ng)
    }

    /// Mean absolute difference over all elements (scalar).
    pub fn mae_loss(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mae_loss shape mismatch");
        let mut acc = 0.0;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            acc += (x - y).to_f64().abs();
        }
        let v = Tensor::scalar(T::from_f64(acc / ta.len() as f64));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MaeLoss { a, b }, ng)
    }

    /// Mean Huber penalty: 0.5 d^2 inside |d| <= delta, linear outside.
    pub fn huber_loss(&mut self, a: Var, b: Var, delta: f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "huber_loss shape mismatch");
        let mut acc = 0.0;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = (x - y).to_f64().abs();
            acc += if d <= delta {
                0.5 * d * d
            } else {
                delta * (d - 0.5 * delta)
            };
        }
        let v = Tensor::scalar(T::from_f64(acc / ta.len() as f64));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::HuberLoss { a, b, delta }, ng)
    }

    /// Weighted sum of scalar vars: sum_i coeff_i * term_i.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut acc = self.scale(terms[0].0, terms[0].1);
        for &(v, c) in &terms[1..] {
            let s = self.scale(v, c);
            acc = self.add(acc, s);
        }
        acc
    }

    pub fn backward(&self, loss: Var) -> Grads<T> {
        self.backward_retaining(loss, &[])
    }

    pub fn backward_retaining(&self, loss: Var, retain: &[Var]) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        let retain_set: Vec<usize> = retain.iter().map(|v| v.0).collect();
        let mut out = Grads {
            by_param: BTreeMap::new(),
            retained: BTreeMap::new(),
        };

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = grads[i].take().unwrap();
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(idx) = param {
                        match out.by_param.get_mut(idx) {
                            Some(acc) => {
                                let sum = acc.zip_map(&g, |a, b| a + b);
                                *acc = sum;
                            }
                            None => {
                                out.by_param.insert(*idx, g.clone());
                            }
                        }
                    }
                    if retain_set.contains(&i) {
                        out.retained.insert(i, g);
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |gv, bv| gv * bv);
                    let db = g.zip_map(self.value(*a), |gv, av| gv * av);
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Scale(a, f) => {
                    let fac = T::from_f64(*f);
                    self.accum(&mut grads, *a, g.map(|v| v * fac));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = g.zip_map(y, |gv, yv| gv * (T::ONE - yv * yv));
                    self.accum(&mut grads, *a, da);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = T::from_f64(*slope);
                    let da = g.zip_map(
                        self.value(*a),
                        |gv, xv| if xv > T::ZERO { gv } else { gv * s },
                    );
                    self.accum(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = g.zip_map(
                        self.value(*a),
                        |gv, xv| if xv > T::ZERO { gv } else { T::ZERO },
                    );
                    self.accum(&mut grads, *a, da);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    if self.needs(*x) {
                        let dx = kernels::conv2d_bwd_input(
                            &g,
                            self.value(*w),
                            self.value(*x).shape(),
                            *stride,
                            *pad,
                        );
                        self.accum(&mut grads, *x, dx);
                    }
                    let need_w = self.needs(*w);
                    let need_b = b.is_some_and(|b| self.needs(b));
                    if need_w || need_b {
                        let (dw, db) = kernels::conv2d_bwd_params(
                            &g,
                            self.value(*x),
                            self.value(*w).shape(),
                            *stride,
                            *pad,
                            need_b,
                        );
                        if need_w {
                            self.accum(&mut grads, *w, dw);
                        }
                        if let (Some(bv), Some(db)) = (b, db) {
                            self.accum(&mut grads, *bv, db);
                        }
                    }
                }
                Op::Conv3d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    if self.needs(*x) {
                        let dx = kernels::conv3d_bwd_input(
                            &g,
                            self.value(*w),
                            self.value(*x).shape(),
                            *stride,
                            *pad,
                        );
                        self.accum(&mut grads, *x, dx);
                    }
                    let need_w = self.needs(*w);
                    let need_b = b.is_some_and(|b| self.needs(b));
                    if need_w || need_b {
                        let (dw, db) = kernels::conv3d_bwd_params(
                            &g,
                            self.value(*x),
                            self.value(*w).shape(),
                            *stride,
                            *pad,
                            need_b,
                        );
                        if need_w {
                            self.accum(&mut grads, *w, dw);
                        }
                        if let (Some(bv), Some(db)) = (b, db) {
                            self.accum(&mut grads, *bv, db);
                        }
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let xs = self.value(*x);
                    let shape = xs.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let s: usize = shape[2..].iter().product();
                    let gdat = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(shape);
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    let inv_s = T::from_f64(1.0 / s as f64);
                    for idx in 0..n * c {
                        let xg = &xs.data()[idx * s..(idx + 1) * s];
                        let gg = &g.data()[idx * s..(idx + 1) * s];
                        let (mu, istd) = (mean.data()[idx], inv_std.data()[idx]);
                        let gc = gdat[idx % c];
                        // accumulate the two reductions first
                        let mut sum_dxhat = T::ZERO;
                        let mut sum_dxhat_xhat = T::ZERO;
                        let mut dg = T::ZERO;
                        let mut db = T::ZERO;
                        for (&xv, &gv) in xg.iter().zip(gg) {
                            let xhat = (xv - mu) * istd;
                            let dxhat = gv * gc;
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            dg = dg + gv * xhat;
                            db = db + gv;
                        }
                        dgamma.data_mut()[idx % c] = dgamma.data_mut()[idx % c] + dg;
                        dbeta.data_mut()[idx % c] = dbeta.data_mut()[idx % c] + db;
                        let m1 = sum_dxhat * inv_s;
                        let m2 = sum_dxhat_xhat * inv_s;
                        for ((dxv, &xv), &gv) in dx.data_mut()[idx * s..(idx + 1) * s]
                            .iter_mut()
                            .zip(xg)
                            .zip(gg)
                        {
                            let xhat = (xv - mu) * istd;
                            let dxhat = gv * gc;
                            *dxv = istd * (dxhat - m1 - xhat * m2);
                        }
                    }
                    if self.needs(*x) {
                        self.accum(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        self.accum(&mut grads, *gamma, dgamma);
                    }
                    if self.needs(*beta) {
                        self.accum(&mut grads, *beta, dbeta);
                    }
                }
                Op::AvgPool { x, spatial } => {
                    let dx = kernels::avg_pool_bwd(&g, self.value(*x).shape(), *spatial);
                    self.accum(&mut grads, *x, dx);
                }
                Op::Upsample2x3d { x } => {
                    let dx = kernels::upsample2x_3d_bwd(&g, self.value(*x).shape());
                    self.accum(&mut grads, *x, dx);
                }
                Op::Replicate { x, pos } => {
                    let dx = kernels::replicate_spatial_bwd(&g, self.value(*x).shape(), *pos);
                    self.accum(&mut grads, *x, dx);
                }
                Op::PermuteSpatial { x, perm } => {
                    let mut inv = [0usize; 3];
                    for (a, &p) in perm.iter().enumerate() {
                        inv[p] = a;
                    }
                    let dx = kernels::permute_spatial(&g, inv);
                    self.accum(&mut grads, *x, dx);
                }
                Op::ConcatChannels { xs } => {
                    let shape = self.nodes[i].value.shape();
                    let n = shape[0];
                    let c_total = shape[1];
                    let sp: usize = shape[2..].iter().product();
                    let mut c_off = 0;
                    for &xv in xs {
                        let c = self.value(xv).shape()[1];
                        if self.needs(xv) {
                            let mut dx = Tensor::zeros(self.value(xv).shape());
                            for ni in 0..n {
                                let src = (ni * c_total + c_off) * sp;
                                dx.data_mut()[ni * c * sp..(ni + 1) * c * sp]
                                    .copy_from_slice(&g.data()[src..src + c * sp]);
                            }
                            self.accum(&mut grads, xv, dx);
                        }
                        c_off += c;
                    }
                }
                Op::CropSpatial { x, offsets } => {
                    let dx = kernels::crop_spatial_bwd(&g, self.value(*x).shape(), *offsets);
                    self.accum(&mut grads, *x, dx);
                }
                Op::Reshape { x } => {
                    let dx = g.reshaped(self.value(*x).shape());
                    self.accum(&mut grads, *x, dx);
                }
                Op::MeanSpatialAxis { x, axis } => {
                    let dx = kernels::mean_spatial_axis_bwd(&g, self.value(*x).shape(), *axis);
                    self.accum(&mut grads, *x, dx);
                }
                Op::MeanAll { x } => {
                    let n = self.value(*x).len();
                    let gv = g.item() * T::from_f64(1.0 / n as f64);
                    self.accum(&mut grads, *x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::MseLoss { a, b } => {
                    let n = self.value(*a).len();
                    let f = g.item() * T::from_f64(2.0 / n as f64);
                    let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * f);
                    if self.needs(*a) {
                        self.accum(&mut grads, *a, diff.clone());
                    }
                    if self.needs(*b) {
                        self.accum(&mut grads, *b, diff.map(|v| -v));
                    }
                }
                Op::MaeLoss { a, b } => {
                    let n = self.value(*a).len();
                    let f = g.item() * T::from_f64(1.0 / n as f64);
                    let sgn = self.value(*a).zip_map(self.value(*b), |x, y| {
                        if x > y {
                            f
                        } else if x < y {
                            -f
                        } else {
                            T::ZERO
                        }
                    });
                    if self.needs(*a) {
                        self.accum(&mut grads, *a, sgn.clone());
                    }
                    if self.needs(*b) {
                        self.accum(&mut grads, *b, sgn.map(|v| -v));
                    }
                }
                Op::HuberLoss { a, b, delta } => {
                    let n = self.value(*a).len();
                    let f = g.item() * T::from_f64(1.0 / n as f64);
                    let dl = T::from_f64(*delta);
                    // d/da = clamp(a - b, -delta, delta) / n
                    let da = self
                        .value(*a)
                        .zip_map(self.value(*b), |x, y| (x - y).maximum(-dl).minimum(dl) * f);
                    if self.needs(*a) {
                        self.accum(&mut grads, *a, da.clone());
                    }
                    if self.needs(*b) {
                        self.accum(&mut grads, *b, da.map(|v| -v));
                    }
                }
            }
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                assert_eq!(acc.shape(), g.shape());
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    /// Central finite differences on every parameter of `build`, compared
    /// against the analytic gradient, at f64.
    fn gradcheck(params: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(p, i))
            .collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eps = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads
                .by_param
                .get(&pi)
                .cloned()
                .unwrap_or(Tensor::zeros(p.shape()));
            for ei in 0..p.len() {
                let eval = |delta: f64| {
                    let mut ps: Vec<Tensor<f64>> = params.to_vec();
                    ps[pi].data_mut()[ei] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> =
                        ps.iter().enumerate().map(|(i, p)| g.param(p, i)).collect();
                    build(&mut g, &vars).0
                };
                let mut gp = Graph::new();
                let mut ps: Vec<Tensor<f64>> = params.to_vec();
                ps[pi].data_mut()[ei] += eps;
                let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| gp.param(p, i)).collect();
                let lp = build(&mut gp, &vars);
                let fp = gp.value(lp).item();

                let mut gm = Graph::new();
                let mut ps: Vec<Tensor<f64>> = params.to_vec();
                ps[pi].data_mut()[ei] -= eps;
                let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| gm.param(p, i)).collect();
                let lm = build(&mut gm, &vars);
                let fm = gm.value(lm).item();

                let fd = (fp - fm) / (2.0 * eps);
                let an = analytic.data()[ei];
                let denom = 1.0_f64.max(fd.abs()).max(an.abs());
                assert!(
                    (fd - an).abs() / denom <= tol,
                    "param {pi} elem {ei}: fd {fd} vs analytic {an}"
                );
                let _ = eval;
            }
        }
    }

    fn randt(shape: &[usize], rng: &mut SeedRng) -> Tensor<f64> {
        Tensor::rand_normal(shape, 0.0, 1.0, rng)
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = SeedRng::new(10);
        let a = randt(&[2, 3], &mut rng);
        let b = randt(&[2, 3], &mut rng);
        gradcheck(
            &[a, b],
            &|g, vars| {
                let s = g.add(vars[0], vars[1]);
                let m = g.mul(s, vars[0]);
                let t = g.tanh(m);
                let d = g.sub(t, vars[1]);
                let l = g.leaky_relu(d, 0.2);
                let r = g.relu(l);
                let sc = g.scale(r, 1.7);
                g.mean_all(sc)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_ops_gradcheck() {
        let mut rng = SeedRng::new(11);
        let x = randt(&[1, 2, 5, 5], &mut rng);
        let w = randt(&[2, 2, 3, 3], &mut rng);
        let b = randt(&[2], &mut rng);
        gradcheck(
            &[x, w, b],
            &|g, v| {
                let c = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
                let t = g.tanh(c);
                g.mean_all(t)
            },
            1e-6,
        );
        let x3 = randt(&[1, 1, 4, 4, 4], &mut rng);
        let w3 = randt(&[2, 1, 3, 3, 3], &mut rng);
        let b3 = randt(&[2], &mut rng);
        gradcheck(
            &[x3, w3, b3],
            &|g, v| {
                let c = g.conv3d(v[0], v[1], Some(v[2]), 1, 1);
                let t = g.tanh(c);
                g.mean_all(t)
            },
            1e-6,
        );
    }

    #[test]
    fn instance_norm_gradcheck() {
        let mut rng = SeedRng::new(12);
        let x = randt(&[2, 2, 3, 3], &mut rng);
        let gamma = randt(&[2], &mut rng);
        let beta = randt(&[2], &mut rng);
        let probe = randt(&[2, 2, 3, 3], &mut rng);
        gradcheck(
            &[x, gamma, beta],
            &|g, v| {
                let n = g.instance_norm(v[0], v[1], v[2]);
                // multiply by a fixed probe so the mean is sensitive to
                // every element (plain mean of a normalized map is ~const)
                let p = g.constant(probe.clone());
                let m = g.mul(n, p);
                g.mean_all(m)
            },
            1e-5,
        );
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = SeedRng::new(13);
        let x = randt(&[1, 2, 4, 4, 4], &mut rng);
        let probe = randt(&[1, 2, 4, 4], &mut rng);
        gradcheck(
            &[x.clone()],
            &|g, v| {
                let p = g.avg_pool(v[0], 3, 2);
                let u = g.upsample2x_3d(p);
                let c = g.crop_spatial(u, [1, 0, 2], [2, 2, 2]);
                let t = g.tanh(c);
                g.mean_all(t)
            },
            1e-6,
        );
        gradcheck(
            &[x.clone()],
            &|g, v| {
                let pm = g.permute_spatial(v[0], [2, 0, 1]);
                let m = g.mean_spatial_axis(pm, 1);
                let pr = g.constant(probe.clone());
                let mm = g.mul(m, pr);
                g.mean_all(mm)
            },
            1e-6,
        );
        let y2 = randt(&[1, 2, 4, 4], &mut rng);
        gradcheck(
            &[x, y2],
            &|g, v| {
                let r = g.replicate_spatial(v[1], 1, 4);
                let cat = g.concat_channels(&[v[0], r]);
                let rs = g.reshape(cat, &[1, 4, 4, 4, 4]);
                let t = g.tanh(rs);
                g.mean_all(t)
            },
            1e-6,
        );
    }

    #[test]
    fn loss_ops_gradcheck() {
        let mut rng = SeedRng::new(14);
        let a = randt(&[2, 3, 3], &mut rng);
        let b = randt(&[2, 3, 3], &mut rng);
        gradcheck(
            &[a.clone(), b.clone()],
            &|g, v| {
                let m = g.mse_loss(v[0], v[1]);
                let n = g.mae_loss(v[0], v[1]);
                g.weighted_sum(&[(m, 0.7), (n, 1.3)])
            },
            1e-6,
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let c = Tensor::from_vec(&[2], vec![3.0, 4.0]);
        let pv = g.param(&p, 0);
        let cv = g.constant(c);
        let m = g.mul(pv, cv);
        let loss = g.mean_all(m);
        let grads = g.backward(loss);
        assert_eq!(grads.by_param.len(), 1);
        let gp = &grads.by_param[&0];
        assert_eq!(gp.data(), &[1.5, 2.0]);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut g = Graph::<f64>::new();
        let p = Tensor::from_vec(&[1], vec![3.0]);
        let pv = g.param(&p, 0);
        let sq = g.mul(pv, pv); // d/dp p^2 = 2p
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        assert!((grads.by_param[&0].data()[0] - 6.0).abs() < 1e-12);
    }
}
