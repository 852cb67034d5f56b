//! Residual classifier in the standard CIFAR layout: a 3×3 stem, three
//! stages of basic blocks at widths (w, 2w, 4w) with stride-2 transitions,
//! global average pooling, and a linear head. `blocks_per_stage = 3` with
//! `base_width = 16` gives the usual 20-layer configuration.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, CacheSlot, Conv2d, Linear, Mode, ParamKind, Params};
use super::ops;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub batch_norm: bool,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        // ResNet-20-style CIFAR configuration
        ResNetConfig {
            in_channels: 3,
            base_width: 16,
            blocks_per_stage: 3,
            num_classes: 10,
            batch_norm: true,
        }
    }
}

impl ResNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 1 || self.blocks_per_stage < 1 {
            return Err(Error::Config(
                "classifier width and blocks_per_stage must be >= 1".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Number of tap points usable as feature layers: stem plus three stages.
pub const FEATURE_STAGES: usize = 4;

#[derive(Clone)]
struct BasicBlock<T: Scalar> {
    conv1: Conv2d<T>,
    bn1: Option<BatchNorm2d<T>>,
    conv2: Conv2d<T>,
    bn2: Option<BatchNorm2d<T>>,
    /// Stride-2 / channel-change projection for the shortcut.
    proj: Option<(Conv2d<T>, Option<BatchNorm2d<T>>)>,
    relu1_y: CacheSlot<Array4<T>>,
    out_y: CacheSlot<Array4<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new(cin: usize, cout: usize, stride: usize, bn: bool, rng: &mut ChaCha8Rng) -> Self {
        let proj = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(cin, cout, 1, stride, 0, rng),
                bn.then(|| BatchNorm2d::new(cout)),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, rng),
            bn1: bn.then(|| BatchNorm2d::new(cout)),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, rng),
            bn2: bn.then(|| BatchNorm2d::new(cout)),
            proj,
            relu1_y: CacheSlot::default(),
            out_y: CacheSlot::default(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let shortcut = match &mut self.proj {
            Some((conv, bn)) => {
                let mut s = conv.forward(x, mode)?;
                if let Some(bn) = bn {
                    s = bn.forward(&s, mode);
                }
                s
            }
            None => x.clone(),
        };
        let mut y = self.conv1.forward(x, mode)?;
        if let Some(bn) = &mut self.bn1 {
            y = bn.forward(&y, mode);
        }
        let y = ops::relu_forward(&y);
        self.relu1_y.set(y.clone());
        let mut z = self.conv2.forward(&y, mode)?;
        if let Some(bn) = &mut self.bn2 {
            z = bn.forward(&z, mode);
        }
        z += &shortcut;
        let out = ops::relu_forward(&z);
        self.out_y.set(out.clone());
        Ok(out)
    }

    fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let shortcut = match &self.proj {
            Some((conv, bn)) => {
                let mut s = conv.infer(x)?;
                if let Some(bn) = bn {
                    s = bn.infer(&s);
                }
                s
            }
            None => x.clone(),
        };
        let mut y = self.conv1.infer(x)?;
        if let Some(bn) = &self.bn1 {
            y = bn.infer(&y);
        }
        let y = ops::relu_forward(&y);
        let mut z = self.conv2.infer(&y)?;
        if let Some(bn) = &self.bn2 {
            z = bn.infer(&z);
        }
        z += &shortcut;
        Ok(ops::relu_forward(&z))
    }

    fn backward(&mut self, dy: &Array4<T>, accum: bool) -> Array4<T> {
        let out = self.out_y.get("resblock").clone();
        let dsum = ops::relu_backward(&out, dy);

        let mut dmain = dsum.clone();
        if let Some(bn) = &mut self.bn2 {
            dmain = bn.backward(&dmain, accum);
        }
        let dmain = self.conv2.backward(&dmain, accum);
        let relu1 = self.relu1_y.get("resblock relu1").clone();
        let mut dmain = ops::relu_backward(&relu1, &dmain);
        if let Some(bn) = &mut self.bn1 {
            dmain = bn.backward(&dmain, accum);
        }
        let dx_main = self.conv1.backward(&dmain, accum);

        let dx_short = match &mut self.proj {
            Some((conv, bn)) => {
                let mut d = dsum;
                if let Some(bn) = bn {
                    d = bn.backward(&d, accum);
                }
                conv.backward(&d, accum)
            }
            None => dsum,
        };
        dx_main + dx_short
    }
}

impl<T: Scalar> Params<T> for BasicBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        if let Some(bn) = &self.bn1 {
            bn.visit(&format!("{prefix}.bn1"), f);
        }
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(bn) = &self.bn2 {
            bn.visit(&format!("{prefix}.bn2"), f);
        }
        if let Some((conv, bn)) = &self.proj {
            conv.visit(&format!("{prefix}.proj"), f);
            if let Some(bn) = bn {
                bn.visit(&format!("{prefix}.proj_bn"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        if let Some(bn) = &mut self.bn1 {
            bn.visit_mut(&format!("{prefix}.bn1"), f);
        }
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        if let Some(bn) = &mut self.bn2 {
            bn.visit_mut(&format!("{prefix}.bn2"), f);
        }
        if let Some((conv, bn)) = &mut self.proj {
            conv.visit_mut(&format!("{prefix}.proj"), f);
            if let Some(bn) = bn {
                bn.visit_mut(&format!("{prefix}.proj_bn"), f);
            }
        }
    }

    fn visit_step(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewD<'_, T>)) {
        self.conv1.visit_step(&format!("{prefix}.conv1"), f);
        if let Some(bn) = &mut self.bn1 {
            bn.visit_step(&format!("{prefix}.bn1"), f);
        }
        self.conv2.visit_step(&format!("{prefix}.conv2"), f);
        if let Some(bn) = &mut self.bn2 {
            bn.visit_step(&format!("{prefix}.bn2"), f);
        }
        if let Some((conv, bn)) = &mut self.proj {
            conv.visit_step(&format!("{prefix}.proj"), f);
            if let Some(bn) = bn {
                bn.visit_step(&format!("{prefix}.proj_bn"), f);
            }
        }
    }

    fn zero_grads(&mut self) {
        self.conv1.zero_grads();
        if let Some(bn) = &mut self.bn1 {
            bn.zero_grads();
        }
        self.conv2.zero_grads();
        if let Some(bn) = &mut self.bn2 {
            bn.zero_grads();
        }
        if let Some((conv, bn)) = &mut self.proj {
            conv.zero_grads();
            if let Some(bn) = bn {
                bn.zero_grads();
            }
        }
    }
}

#[derive(Clone)]
pub struct ResNet<T: Scalar> {
    pub cfg: ResNetConfig,
    stem: Conv2d<T>,
    stem_bn: Option<BatchNorm2d<T>>,
    stem_y: CacheSlot<Array4<T>>,
    stages: Vec<Vec<BasicBlock<T>>>,
    fc: Linear<T>,
    gap_dims: CacheSlot<(usize, usize)>,
}

impl<T: Scalar> ResNet<T> {
    pub fn build(cfg: &ResNetConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let bn = cfg.batch_norm;
        let w = cfg.base_width;
        let stem = Conv2d::new(cfg.in_channels, w, 3, 1, 1, &mut rng);
        let stem_bn = bn.then(|| BatchNorm2d::new(w));
        let mut stages = Vec::with_capacity(3);
        let widths = [w, 2 * w, 4 * w];
        let mut cin = w;
        for (s, &cout) in widths.iter().enumerate() {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(cin, cout, stride, bn, &mut rng));
                cin = cout;
            }
            stages.push(blocks);
        }
        let fc = Linear::new(4 * w, cfg.num_classes, &mut rng);
        Ok(ResNet {
            cfg: cfg.clone(),
            stem,
            stem_bn,
            stem_y: CacheSlot::default(),
            stages,
            fc,
            gap_dims: CacheSlot::default(),
        })
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Domain(format!(
                "classifier input has {c} channels, expected {}",
                self.cfg.in_channels
            )));
        }
        if h < 4 || w < 4 {
            return Err(Error::Domain(format!(
                "classifier input {h}x{w} too small for two stride-2 stages"
            )));
        }
        Ok(())
    }

    fn run_stem(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let mut y = self.stem.forward(x, mode)?;
        if let Some(bn) = &mut self.stem_bn {
            y = bn.forward(&y, mode);
        }
        let y = ops::relu_forward(&y);
        self.stem_y.set(y.clone());
        Ok(y)
    }

    fn infer_stem(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let mut y = self.stem.infer(x)?;
        if let Some(bn) = &self.stem_bn {
            y = bn.infer(&y);
        }
        Ok(ops::relu_forward(&y))
    }

    /// Cached forward pass to logits `[m, num_classes]`.
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array2<T>> {
        self.check_input(x)?;
        let mut cur = self.run_stem(x, mode)?;
        for s in 0..3 {
            for b in 0..self.stages[s].len() {
                cur = self.stages[s][b].forward(&cur, mode)?;
            }
        }
        let (_, _, h, w) = cur.dim();
        self.gap_dims.set((h, w));
        let pooled = ops::global_avg_pool(&cur);
        Ok(self.fc.forward(&pooled))
    }

    /// Pure inference to logits.
    pub fn infer_logits(&self, x: &Array4<T>) -> Result<Array2<T>> {
        self.check_input(x)?;
        let mut cur = self.infer_stem(x)?;
        for stage in &self.stages {
            for block in stage {
                cur = block.infer(&cur)?;
            }
        }
        Ok(self.fc.infer(&ops::global_avg_pool(&cur)))
    }

    /// Probability rows (softmax over logits); each row sums to 1.
    pub fn classify(&self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(ops::softmax_rows(&self.infer_logits(x)?))
    }

    /// Backward from logits down to the input batch.
    pub fn backward(&mut self, dlogits: &Array2<T>, accum: bool) -> Array4<T> {
        let dpooled = self.fc.backward(dlogits, accum);
        let (h, w) = *self.gap_dims.get("resnet gap");
        let mut d = ops::global_avg_pool_backward(&dpooled, (h, w));
        for s in (0..3).rev() {
            for b in (0..self.stages[s].len()).rev() {
                d = self.stages[s][b].backward(&d, accum);
            }
        }
        self.backward_stem(d, accum)
    }

    fn backward_stem(&mut self, d: Array4<T>, accum: bool) -> Array4<T> {
        let stem_y = self.stem_y.get("resnet stem").clone();
        let mut d = ops::relu_backward(&stem_y, &d);
        if let Some(bn) = &mut self.stem_bn {
            d = bn.backward(&d, accum);
        }
        self.stem.backward(&d, accum)
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > FEATURE_STAGES {
            return Err(Error::Config(format!(
                "feature stage {stage} out of range 1..={FEATURE_STAGES}"
            )));
        }
        Ok(())
    }

    /// Cached forward through the stem and the first `stage - 1` stages
    /// (stage 1 = stem output, stage 4 = last stage output).
    pub fn forward_prefix(&mut self, x: &Array4<T>, stage: usize, mode: Mode) -> Result<Array4<T>> {
        self.check_stage(stage)?;
        self.check_input(x)?;
        let mut cur = self.run_stem(x, mode)?;
        for s in 0..stage - 1 {
            for b in 0..self.stages[s].len() {
                cur = self.stages[s][b].forward(&cur, mode)?;
            }
        }
        Ok(cur)
    }

    /// Pure-inference version of [`Self::forward_prefix`].
    pub fn infer_prefix(&self, x: &Array4<T>, stage: usize) -> Result<Array4<T>> {
        self.check_stage(stage)?;
        self.check_input(x)?;
        let mut cur = self.infer_stem(x)?;
        for s in 0..stage - 1 {
            for block in &self.stages[s] {
                cur = block.infer(&cur)?;
            }
        }
        Ok(cur)
    }

    /// Backward through a cached prefix pass.
    pub fn backward_prefix(&mut self, dfeat: &Array4<T>, stage: usize, accum: bool) -> Array4<T> {
        self.check_stage(stage).expect("stage validated on forward");
        let mut d = dfeat.clone();
        for s in (0..stage - 1).rev() {
            for b in (0..self.stages[s].len()).rev() {
                d = self.stages[s][b].backward(&d, accum);
            }
        }
        self.backward_stem(d, accum)
    }

    /// Feature-map shape produced by `infer_prefix` for a given input size.
    pub fn prefix_dims(&self, stage: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.check_stage(stage)?;
        let wbase = self.cfg.base_width;
        Ok(match stage {
            1 | 2 => (wbase, h, w),
            3 => (2 * wbase, h.div_ceil(2), w.div_ceil(2)),
            _ => (4 * wbase, h.div_ceil(4), w.div_ceil(4)),
        })
    }
}

impl<T: Scalar> Params<T> for ResNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>)) {
        self.stem.visit(&format!("{prefix}stem"), f);
        if let Some(bn) = &self.stem_bn {
            bn.visit(&format!("{prefix}stem_bn"), f);
        }
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit(&format!("{prefix}stage{s}.block{b}"), f);
            }
        }
        self.fc.visit(&format!("{prefix}fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>)) {
        self.stem.visit_mut(&format!("{prefix}stem"), f);
        if let Some(bn) = &mut self.stem_bn {
            bn.visit_mut(&format!("{prefix}stem_bn"), f);
        }
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("{prefix}stage{s}.block{b}"), f);
            }
        }
        self.fc.visit_mut(&format!("{prefix}fc"), f);
    }

    fn visit_step(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewD<'_, T>)) {
        self.stem.visit_step(&format!("{prefix}stem"), f);
        if let Some(bn) = &mut self.stem_bn {
            bn.visit_step(&format!("{prefix}stem_bn"), f);
        }
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_step(&format!("{prefix}stage{s}.block{b}"), f);
            }
        }
        self.fc.visit_step(&format!("{prefix}fc"), f);
    }

    fn zero_grads(&mut self) {
        self.stem.zero_grads();
        if let Some(bn) = &mut self.stem_bn {
            bn.zero_grads();
        }
        for stage in &mut self.stages {
            for block in stage {
                block.zero_grads();
            }
        }
        self.fc.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn toy_cfg() -> ResNetConfig {
        ResNetConfig {
            in_channels: 3,
            base_width: 4,
            blocks_per_stage: 1,
            num_classes: 2,
            batch_norm: false,
        }
    }

    fn rand_batch(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(dim, || rng.gen::<f64>())
    }

    #[test]
    fn classify_rows_are_probability_vectors() {
        let net: ResNet<f64> = ResNet::build(&toy_cfg(), 0).unwrap();
        let x = rand_batch((3, 3, 8, 8), 1);
        let p = net.classify(&x).unwrap();
        assert_eq!(p.dim(), (3, 2));
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn prefix_stage_bounds_are_checked() {
        let net: ResNet<f64> = ResNet::build(&toy_cfg(), 0).unwrap();
        let x = rand_batch((1, 3, 8, 8), 2);
        assert!(matches!(net.infer_prefix(&x, 0), Err(Error::Config(_))));
        assert!(matches!(net.infer_prefix(&x, 5), Err(Error::Config(_))));
        for stage in 1..=FEATURE_STAGES {
            let f = net.infer_prefix(&x, stage).unwrap();
            let (c, h, w) = net.prefix_dims(stage, 8, 8).unwrap();
            assert_eq!(f.dim(), (1, c, h, w));
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut net: ResNet<f64> = ResNet::build(&toy_cfg(), 7).unwrap();
        let x = rand_batch((2, 3, 8, 8), 3);
        let gw = Array2::from_shape_simple_fn((2, 2), {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            move || rng.gen::<f64>() - 0.5
        });
        net.forward(&x, Mode::Train).unwrap();
        let dx = net.backward(&gw, false);

        let eps = 1e-6;
        for &(i, c, h, w) in &[(0usize, 0usize, 0usize, 0usize), (1, 2, 7, 3), (0, 1, 4, 4)] {
            let mut xp = x.clone();
            xp[[i, c, h, w]] += eps;
            let lp = (net.infer_logits(&xp).unwrap() * &gw).sum();
            xp[[i, c, h, w]] -= 2.0 * eps;
            let lm = (net.infer_logits(&xp).unwrap() * &gw).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx[[i, c, h, w]];
            assert!(
                (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8) < 1e-6,
                "fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn prefix_backward_matches_finite_differences() {
        let mut net: ResNet<f64> = ResNet::build(&toy_cfg(), 9).unwrap();
        let x = rand_batch((1, 3, 8, 8), 5);
        let stage = 2;
        let feat = net.forward_prefix(&x, stage, Mode::EvalCached).unwrap();
        let gw = rand_batch(feat.dim(), 6);
        let dx = net.backward_prefix(&gw, stage, false);

        let eps = 1e-6;
        for &(c, h, w) in &[(0usize, 0usize, 0usize), (2, 5, 1), (1, 7, 7)] {
            let mut xp = x.clone();
            xp[[0, c, h, w]] += eps;
            let lp = (net.infer_prefix(&xp, stage).unwrap() * &gw).sum();
            xp[[0, c, h, w]] -= 2.0 * eps;
            let lm = (net.infer_prefix(&xp, stage).unwrap() * &gw).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx[[0, c, h, w]];
            assert!(
                (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8) < 1e-6,
                "fd {fd} vs analytic {an}"
            );
        }
    }
}
