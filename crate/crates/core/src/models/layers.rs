//! Parameterized layers: a thin stateful shell around the functions in
//! [`super::ops`]. Each layer owns its parameters, gradient buffers, and the
//! forward cache its backward pass needs. Inference (`infer`) never touches
//! the caches, so it works on a shared reference.

use crate::error::Result;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::ops;

/// Forward mode for cached passes.
///
/// `Train` lets batchnorm use batch statistics and update its running
/// estimates. `EvalCached` keeps eval semantics (running statistics, no
/// state update) but still records what backward needs — used when
/// backpropagating through a frozen feature path.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    EvalCached,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Forward-pass cache slot. Cloning a layer yields an empty slot so cloned
/// networks (snapshots, perturbed copies) start fresh.
pub(crate) struct CacheSlot<X>(Option<X>);

impl<X> Clone for CacheSlot<X> {
    fn clone(&self) -> Self {
        CacheSlot(None)
    }
}

impl<X> Default for CacheSlot<X> {
    fn default() -> Self {
        CacheSlot(None)
    }
}

impl<X> CacheSlot<X> {
    pub(crate) fn set(&mut self, v: X) {
        self.0 = Some(v);
    }

    pub(crate) fn get(&self, what: &str) -> &X {
        self.0.as_ref().unwrap_or_else(|| panic!("{what}: backward before forward"))
    }
}

/// Uniform access to a module's parameter tensors, in a fixed declaration
/// order. Checkpointing, the optimizer, and the gradient checker all walk
/// parameters through this trait.
pub trait Params<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>));
    /// Trainable `(param, grad)` pairs for an optimizer step.
    fn visit_step(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewD<'_, T>));
    fn zero_grads(&mut self);

    fn trainable_len(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, v| {
            if kind == ParamKind::Trainable {
                n += v.len();
            }
        });
        n
    }
}

#[derive(Clone)]
pub struct Conv2d<T: Scalar> {
    pub w: Array4<T>,
    pub b: Array1<T>,
    pub gw: Array4<T>,
    pub gb: Array1<T>,
    pub stride: usize,
    pub pad: usize,
    cache_x: CacheSlot<Array4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialized convolution.
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let w = Array4::from_shape_simple_fn((cout, cin, kernel, kernel), || {
            T::sample_standard_normal(rng) * T::from_f64(std)
        });
        Conv2d {
            gw: Array4::zeros(w.dim()),
            w,
            b: Array1::zeros(cout),
            gb: Array1::zeros(cout),
            stride,
            pad,
            cache_x: CacheSlot::default(),
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Result<Array4<T>> {
        let y = ops::conv2d_forward(&x.view(), &self.w, &self.b, self.stride, self.pad)?;
        self.cache_x.set(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        ops::conv2d_forward(&x.view(), &self.w, &self.b, self.stride, self.pad)
    }

    pub fn backward(&mut self, dy: &Array4<T>, accum: bool) -> Array4<T> {
        let x = self.cache_x.get("conv");
        let (dx, dw, db) =
            ops::conv2d_backward(&x.view(), &self.w, dy, self.stride, self.pad)
                .expect("cached conv shapes are consistent");
        if accum {
            self.gw += &dw;
            self.gb += &db;
        }
        dx
    }
}

impl<T: Scalar> Params<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>)) {
        f(&format!("{prefix}.w"), ParamKind::Trainable, self.w.view().into_dyn());
        f(&format!("{prefix}.b"), ParamKind::Trainable, self.b.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>)) {
        f(&format!("{prefix}.w"), ParamKind::Trainable, self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), ParamKind::Trainable, self.b.view_mut().into_dyn());
    }

    fn visit_step(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewD<'_, T>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn(), self.gw.view().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn(), self.gb.view().into_dyn());
    }

    fn zero_grads(&mut self) {
        self.gw.fill(T::zero());
        self.gb.fill(T::zero());
    }
}

enum BnCache<T: Scalar> {
    Train(ops::BnTrainCache<T>),
    Eval,
}

#[derive(Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub ggamma: Array1<T>,
    pub gbeta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
    pub eps: T,
    cache: CacheSlot<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
            cache: CacheSlot::default(),
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        match mode {
            Mode::Train => {
                let (y, cache) = ops::batchnorm_train_forward(
                    x,
                    &self.gamma,
                    &self.beta,
                    &mut self.running_mean,
                    &mut self.running_var,
                    self.momentum,
                    self.eps,
                );
                self.cache.set(BnCache::Train(cache));
                y
            }
            Mode::EvalCached => {
                self.cache.set(BnCache::Eval);
                self.infer(x)
            }
        }
    }

    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        ops::batchnorm_eval_forward(
            &x.view(),
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    pub fn backward(&mut self, dy: &Array4<T>, accum: bool) -> Array4<T> {
        match self.cache.get("bn") {
            BnCache::Train(cache) => {
                let (dx, dgamma, dbeta) = ops::batchnorm_train_backward(cache, &self.gamma, dy);
                if accum {
                    self.ggamma += &dgamma;
                    self.gbeta += &dbeta;
                }
                dx
            }
            BnCache::Eval => {
                // grads into gamma/beta are only needed on the train path
                ops::batchnorm_eval_backward(&self.gamma, &self.running_var, self.eps, dy)
            }
        }
    }
}

impl<T: Scalar> Params<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>)) {
        f(&format!("{prefix}.gamma"), ParamKind::Trainable, self.gamma.view().into_dyn());
        f(&format!("{prefix}.beta"), ParamKind::Trainable, self.beta.view().into_dyn());
        f(&format!("{prefix}.running_mean"), ParamKind::Buffer, self.running_mean.view().into_dyn());
        f(&format!("{prefix}.running_var"), ParamKind::Buffer, self.running_var.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>)) {
        f(&format!("{prefix}.gamma"), ParamKind::Trainable, self.gamma.view_mut().into_dyn());
        f(&format!("{prefix}.beta"), ParamKind::Trainable, self.beta.view_mut().into_dyn());
        f(&format!("{prefix}.running_mean"), ParamKind::Buffer, self.running_mean.view_mut().into_dyn());
        f(&format!("{prefix}.running_var"), ParamKind::Buffer, self.running_var.view_mut().into_dyn());
    }

    fn visit_step(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewD<'_, T>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn(), self.ggamma.view().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view_mut().into_dyn(), self.gbeta.view().into_dyn());
    }

    fn zero_grads(&mut self) {
        self.ggamma.fill(T::zero());
        self.gbeta.fill(T::zero());
    }
}

#[derive(Clone)]
pub struct Linear<T: Scalar> {
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub gw: Array2<T>,
    pub gb: Array1<T>,
    cache_x: CacheSlot<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(din: usize, dout: usize, rng: &mut R) -> Self {
        let std = (2.0 / din as f64).sqrt();
        let w = Array2::from_shape_simple_fn((dout, din), || {
            T::sample_standard_normal(rng) * T::from_f64(std)
        });
        Linear {
            gw: Array2::zeros(w.dim()),
            w,
            b: Array1::zeros(dout),
            gb: Array1::zeros(dout),
            cache_x: CacheSlot::default(),
        }
    }

    pub fn forward(&mut self, x: &Array2<T>) -> Array2<T> {
        let y = ops::linear_forward(x, &self.w, &self.b);
        self.cache_x.set(x.clone());
        y
    }

    pub fn infer(&self, x: &Array2<T>) -> Array2<T> {
        ops::linear_forward(x, &self.w, &self.b)
    }

    pub fn backward(&mut self, dy: &Array2<T>, accum: bool) -> Array2<T> {
        let x = self.cache_x.get("linear");
        let (dx, dw, db) = ops::linear_backward(x, &self.w, dy);
        if accum {
            self.gw += &dw;
            self.gb += &db;
        }
        dx
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>)) {
        f(&format!("{prefix}.w"), ParamKind::Trainable, self.w.view().into_dyn());
        f(&format!("{prefix}.b"), ParamKind::Trainable, self.b.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>)) {
        f(&format!("{prefix}.w"), ParamKind::Trainable, self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), ParamKind::Trainable, self.b.view_mut().into_dyn());
    }

    fn visit_step(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewD<'_, T>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn(), self.gw.view().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn(), self.gb.view().into_dyn());
    }

    fn zero_grads(&mut self) {
        self.gw.fill(T::zero());
        self.gb.fill(T::zero());
    }
}

/// conv → (bn) → relu, the repeated building unit of the encoder-decoder
/// nets.
#[derive(Clone)]
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
    relu_y: CacheSlot<Array4<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, batch_norm: bool, rng: &mut R) -> Self {
        ConvBlock {
            conv: Conv2d::new(cin, cout, 3, 1, 1, rng),
            bn: batch_norm.then(|| BatchNorm2d::new(cout)),
            relu_y: CacheSlot::default(),
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let mut y = self.conv.forward(x, mode)?;
        if let Some(bn) = &mut self.bn {
            y = bn.forward(&y, mode);
        }
        let y = ops::relu_forward(&y);
        self.relu_y.set(y.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let mut y = self.conv.infer(x)?;
        if let Some(bn) = &self.bn {
            y = bn.infer(&y);
        }
        Ok(ops::relu_forward(&y))
    }

    pub fn backward(&mut self, dy: &Array4<T>, accum: bool) -> Array4<T> {
        let y = self.relu_y.get("conv block");
        let mut d = ops::relu_backward(y, dy);
        if let Some(bn) = &mut self.bn {
            d = bn.backward(&d, accum);
        }
        self.conv.backward(&d, accum)
    }
}

impl<T: Scalar> Params<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        if let Some(bn) = &self.bn {
            bn.visit(&format!("{prefix}.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&format!("{prefix}.bn"), f);
        }
    }

    fn visit_step(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewD<'_, T>)) {
        self.conv.visit_step(&format!("{prefix}.conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_step(&format!("{prefix}.bn"), f);
        }
    }

    fn zero_grads(&mut self) {
        self.conv.zero_grads();
        if let Some(bn) = &mut self.bn {
            bn.zero_grads();
        }
    }
}
