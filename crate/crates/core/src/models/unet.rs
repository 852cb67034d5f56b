//! Encoder-decoder image-to-image network with skip connections.
//!
//! Serves as both the transformation net (plain → protected) and the inverse
//! net the attack harness trains (protected → estimated plain). Outputs go
//! through a logistic squash so they stay inside [0, 1].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{CacheSlot, Conv2d, ConvBlock, Mode, ParamKind, Params};
use super::ops;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel width at full resolution; level `l` uses `base_width << l`.
    pub base_width: usize,
    /// Number of pool/upsample levels (≥ 1).
    pub depth: usize,
    pub batch_norm: bool,
    /// Concatenate the raw input onto the last decoder features before the
    /// output convolution.
    pub input_skip: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        // standard CIFAR-scale configuration
        UNetConfig {
            in_channels: 3,
            base_width: 16,
            depth: 2,
            batch_norm: true,
            input_skip: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config(format!(
                "encoder-decoder depth must be >= 1, got {}",
                self.depth
            )));
        }
        if self.base_width < 1 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Two conv(+bn)+relu blocks in sequence.
#[derive(Clone)]
struct DoubleBlock<T: Scalar> {
    a: ConvBlock<T>,
    b: ConvBlock<T>,
}

impl<T: Scalar> DoubleBlock<T> {
    fn new(cin: usize, cout: usize, bn: bool, rng: &mut ChaCha8Rng) -> Self {
        DoubleBlock {
            a: ConvBlock::new(cin, cout, bn, rng),
            b: ConvBlock::new(cout, cout, bn, rng),
        }
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let y = self.a.forward(x, mode)?;
        self.b.forward(&y, mode)
    }

    fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.b.infer(&self.a.infer(x)?)
    }

    fn backward(&mut self, dy: &Array4<T>, accum: bool) -> Array4<T> {
        let d = self.b.backward(dy, accum);
        self.a.backward(&d, accum)
    }
}

impl<T: Scalar> Params<T> for DoubleBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>)) {
        self.a.visit(&format!("{prefix}.a"), f);
        self.b.visit(&format!("{prefix}.b"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>)) {
        self.a.visit_mut(&format!("{prefix}.a"), f);
        self.b.visit_mut(&format!("{prefix}.b"), f);
    }

    fn visit_step(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewD<'_, T>)) {
        self.a.visit_step(&format!("{prefix}.a"), f);
        self.b.visit_step(&format!("{prefix}.b"), f);
    }

    fn zero_grads(&mut self) {
        self.a.zero_grads();
        self.b.zero_grads();
    }
}

/// Decoder level: channel-reduce at low resolution, ×2 upsample, merge with
/// the matching encoder skip.
#[derive(Clone)]
struct DecLevel<T: Scalar> {
    reduce: ConvBlock<T>,
    merge: ConvBlock<T>,
}

#[derive(Clone)]
pub struct UNet<T: Scalar> {
    pub cfg: UNetConfig,
    enc: Vec<DoubleBlock<T>>, // levels 0..=depth; the last is the bottleneck
    dec: Vec<DecLevel<T>>,    // index = target level 0..depth
    head: Conv2d<T>,
    pool_idx: CacheSlot<Vec<Array4<u8>>>,
    sig_y: CacheSlot<Array4<T>>,
}

impl<T: Scalar> UNet<T> {
    /// Deterministic construction: the same `(cfg, init_seed)` always yields
    /// bitwise-identical parameters.
    pub fn build(cfg: &UNetConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let bn = cfg.batch_norm;
        let mut enc = Vec::with_capacity(cfg.depth + 1);
        enc.push(DoubleBlock::new(cfg.in_channels, cfg.width(0), bn, &mut rng));
        for l in 1..=cfg.depth {
            enc.push(DoubleBlock::new(cfg.width(l - 1), cfg.width(l), bn, &mut rng));
        }
        let mut dec = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            dec.push(DecLevel {
                reduce: ConvBlock::new(cfg.width(l + 1), cfg.width(l), bn, &mut rng),
                merge: ConvBlock::new(2 * cfg.width(l), cfg.width(l), bn, &mut rng),
            });
        }
        let head_in = cfg.width(0) + if cfg.input_skip { cfg.in_channels } else { 0 };
        let head = Conv2d::new(head_in, cfg.in_channels, 3, 1, 1, &mut rng);
        Ok(UNet {
            cfg: cfg.clone(),
            enc,
            dec,
            head,
            pool_idx: CacheSlot::default(),
            sig_y: CacheSlot::default(),
        })
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Domain(format!(
                "transform input has {c} channels, network expects {}",
                self.cfg.in_channels
            )));
        }
        let div = 1 << self.cfg.depth;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::Domain(format!(
                "spatial dims {h}x{w} must be positive multiples of {div} (depth {})",
                self.cfg.depth
            )));
        }
        Ok(())
    }

    /// Cached forward pass for training or frozen-feature backprop.
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        self.check_input(x)?;
        let depth = self.cfg.depth;
        let mut skips: Vec<Array4<T>> = Vec::with_capacity(depth);
        let mut idxs: Vec<Array4<u8>> = Vec::with_capacity(depth);
        let mut cur = self.enc[0].forward(x, mode)?;
        skips.push(cur.clone());
        for l in 1..=depth {
            let (pooled, idx) = ops::maxpool2_forward(&cur)?;
            idxs.push(idx);
            cur = self.enc[l].forward(&pooled, mode)?;
            if l < depth {
                skips.push(cur.clone());
            }
        }
        for l in (0..depth).rev() {
            let r = self.dec[l].reduce.forward(&cur, mode)?;
            let up = ops::upsample2_forward(&r);
            let cat = ops::concat_channels(&up, &skips[l]);
            cur = self.dec[l].merge.forward(&cat, mode)?;
        }
        let head_in = if self.cfg.input_skip {
            ops::concat_channels(&cur, x)
        } else {
            cur
        };
        let z = self.head.forward(&head_in, mode)?;
        let y = ops::sigmoid_forward(&z);
        self.pool_idx.set(idxs);
        self.sig_y.set(y.clone());
        Ok(y)
    }

    /// Pure inference; deterministic given the parameters.
    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check_input(x)?;
        let depth = self.cfg.depth;
        let mut skips: Vec<Array4<T>> = Vec::with_capacity(depth);
        let mut cur = self.enc[0].infer(x)?;
        skips.push(cur.clone());
        for l in 1..=depth {
            let (pooled, _) = ops::maxpool2_forward(&cur)?;
            cur = self.enc[l].infer(&pooled)?;
            if l < depth {
                skips.push(cur.clone());
            }
        }
        for l in (0..depth).rev() {
            let r = self.dec[l].reduce.infer(&cur)?;
            let up = ops::upsample2_forward(&r);
            let cat = ops::concat_channels(&up, &skips[l]);
            cur = self.dec[l].merge.infer(&cat)?;
        }
        let head_in = if self.cfg.input_skip {
            ops::concat_channels(&cur, x)
        } else {
            cur
        };
        Ok(ops::sigmoid_forward(&self.head.infer(&head_in)?))
    }

    /// Backward through the cached forward pass; returns the gradient with
    /// respect to the input batch.
    pub fn backward(&mut self, dy: &Array4<T>, accum: bool) -> Array4<T> {
        let depth = self.cfg.depth;
        let y = self.sig_y.get("unet sigmoid").clone();
        let dz = ops::sigmoid_backward(&y, dy);
        let dhead_in = self.head.backward(&dz, accum);
        let (mut d, dx_direct) = if self.cfg.input_skip {
            let (a, b) = ops::split_channels(&dhead_in, self.cfg.width(0));
            (a, Some(b))
        } else {
            (dhead_in, None)
        };
        let mut dskips: Vec<Option<Array4<T>>> = vec![None; depth];
        for l in 0..depth {
            let dcat = self.dec[l].merge.backward(&d, accum);
            let (dup, dskip) = ops::split_channels(&dcat, self.cfg.width(l));
            dskips[l] = Some(dskip);
            let dr = ops::upsample2_backward(&dup);
            d = self.dec[l].reduce.backward(&dr, accum);
        }
        let idxs = self.pool_idx.get("unet pools").clone();
        for l in (1..=depth).rev() {
            if l < depth {
                d += dskips[l].as_ref().expect("skip grad populated");
            }
            let dpooled = self.enc[l].backward(&d, accum);
            d = ops::maxpool2_backward(&idxs[l - 1], &dpooled);
        }
        d += dskips[0].as_ref().expect("skip grad populated");
        let mut dx = self.enc[0].backward(&d, accum);
        if let Some(extra) = dx_direct {
            dx += &extra;
        }
        dx
    }
}

impl<T: Scalar> Params<T> for UNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>)) {
        for (l, blk) in self.enc.iter().enumerate() {
            blk.visit(&format!("{prefix}enc{l}"), f);
        }
        for (l, lvl) in self.dec.iter().enumerate() {
            lvl.reduce.visit(&format!("{prefix}dec{l}.reduce"), f);
            lvl.merge.visit(&format!("{prefix}dec{l}.merge"), f);
        }
        self.head.visit(&format!("{prefix}head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>)) {
        for (l, blk) in self.enc.iter_mut().enumerate() {
            blk.visit_mut(&format!("{prefix}enc{l}"), f);
        }
        for (l, lvl) in self.dec.iter_mut().enumerate() {
            lvl.reduce.visit_mut(&format!("{prefix}dec{l}.reduce"), f);
            lvl.merge.visit_mut(&format!("{prefix}dec{l}.merge"), f);
        }
        self.head.visit_mut(&format!("{prefix}head"), f);
    }

    fn visit_step(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewD<'_, T>)) {
        for (l, blk) in self.enc.iter_mut().enumerate() {
            blk.visit_step(&format!("{prefix}enc{l}"), f);
        }
        for (l, lvl) in self.dec.iter_mut().enumerate() {
            lvl.reduce.visit_step(&format!("{prefix}dec{l}.reduce"), f);
            lvl.merge.visit_step(&format!("{prefix}dec{l}.merge"), f);
        }
        self.head.visit_step(&format!("{prefix}head"), f);
    }

    fn zero_grads(&mut self) {
        for blk in &mut self.enc {
            blk.zero_grads();
        }
        for lvl in &mut self.dec {
            lvl.reduce.zero_grads();
            lvl.merge.zero_grads();
        }
        self.head.zero_grads();
    }
}
