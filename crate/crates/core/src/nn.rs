//! Parameter storage, layer building blocks, and the Adam optimizer.

use std::collections::BTreeMap;

use crate::graph::{Graph, Var};
use crate::rng::SeedRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat named parameter set owned by one network.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Order-insensitive content hash, used by the training-isolation checks.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, t) in self.iter() {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
            }
            for v in t.data() {
                let bits = v.to_f64().to_bits();
                h = (h ^ bits).wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }

    pub fn to_f32_store(&self) -> ParamStore<f32> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.to_f32_tensor()).collect(),
        }
    }

    /// Replace values from `(name, tensor)` pairs; shapes must match.
    pub fn load_values(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> crate::Result<()> {
        for (name, val) in self.names.iter().zip(self.values.iter_mut()) {
            let src = tensors.get(name).ok_or_else(|| {
                crate::Error::Config(format!("checkpoint missing parameter {name}"))
            })?;
            if src.shape() != val.shape() {
                return Err(crate::Error::ShapeMismatch(format!(
                    "parameter {name}: checkpoint {:?} vs model {:?}",
                    src.shape(),
                    val.shape()
                )));
            }
            *val = src.clone();
        }
        Ok(())
    }
}

/// Forward-pass context: the graph, the parameter store feeding it, and
/// whether those parameters are trainable in this pass.
pub struct Ctx<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Ctx {
            graph,
            store,
            trainable,
        }
    }

    /// Bring a stored parameter into the graph.
    pub fn p(&mut self, id: ParamId) -> Var {
        if self.trainable {
            self.graph.param(self.store.get(id), id.0)
        } else {
            self.graph.constant(self.store.get(id).clone())
        }
    }
}

/// GAN-style initialization: weights ~ N(0, 0.02), zero biases.
pub const WEIGHT_STD: f64 = 0.02;

pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::rand_normal(&[cout, cin, k, k], 0.0, WEIGHT_STD, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv2dLayer {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

pub struct Conv3dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::rand_normal(&[cout, cin, k, k, k], 0.0, WEIGHT_STD, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv3dLayer {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.graph.conv3d(x, w, Some(b), self.stride, self.pad)
    }
}

pub struct InstanceNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNormLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::ONE));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        InstanceNormLayer { gamma, beta }
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.graph.instance_norm(x, g, b)
    }
}

/// Adam with the usual bias correction. Moments live alongside the store
/// they optimize; both serialize into checkpoints for exact resume.
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let m = store
            .values
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let v = store
            .values
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<usize, Tensor<T>>, lr: f64) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_b1 = T::from_f64(1.0 - self.beta1);
        let one_b2 = T::from_f64(1.0 - self.beta2);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::from_f64(lr / bc1);
        let bc2_sqrt_inv = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);
        for (&idx, g) in grads {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = &mut store.values[idx];
            for i in 0..g.len() {
                let gv = g.data()[i];
                let mv = b1 * m.data()[i] + one_b1 * gv;
                let vv = b2 * v.data()[i] + one_b2 * gv * gv;
                m.data_mut()[i] = mv;
                v.data_mut()[i] = vv;
                let denom = vv.sqrt() * bc2_sqrt_inv + eps;
                p.data_mut()[i] = p.data()[i] - step * (mv / denom);
            }
        }
    }

    /// Moment tensors for checkpointing, named `<prefix>.m.<i>` / `<prefix>.v.<i>`.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("{prefix}.m.{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("{prefix}.v.{i}"), v.clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        prefix: &str,
        t: u64,
        tensors: &BTreeMap<String, Tensor<T>>,
    ) -> crate::Result<()> {
        self.t = t;
        for (i, m) in self.m.iter_mut().enumerate() {
            let key = format!("{prefix}.m.{i}");
            *m = tensors
                .get(&key)
                .ok_or_else(|| crate::Error::Config(format!("checkpoint missing {key}")))?
                .clone();
        }
        for (i, v) in self.v.iter_mut().enumerate() {
            let key = format!("{prefix}.v.{i}");
            *v = tensors
                .get(&key)
                .ok_or_else(|| crate::Error::Config(format!("checkpoint missing {key}")))?
                .clone();
        }
        Ok(())
    }
}
