//! Region-proposal backbone and heads.

use super::DetectorConfig;
use crate::nn::{relu, relu_backward, BatchNorm3d, BatchNormCache, Conv3d, Init, Param, Parameterized, Real, Tensor};
use crate::{Error, Result};
use rand::Rng;

/// Total backbone stride.
pub const STRIDE: usize = 8;

#[derive(Debug)]
struct Block<T> {
    conv: Conv3d<T>,
    bn: BatchNorm3d<T>,
}

struct BlockTrace<T> {
    input: Tensor<T>,
    cache: BatchNormCache<T>,
    pre: Tensor<T>,
}

/// conv → batch-norm → ReLU blocks in three stages, each opening with a
/// stride-2 2³ convolution that doubles the width, then 1×1
/// classification (one logit per anchor size) and regression (six deltas
/// per anchor size) heads.
#[derive(Debug)]
pub struct DetectorNet<T> {
    blocks: Vec<Block<T>>,
    cls: Conv3d<T>,
    reg: Conv3d<T>,
    pub n_anchors: usize,
}

pub struct DetectorTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    features: Tensor<T>,
    /// `[N, A, gz, gy, gx]` logits.
    pub cls: Tensor<T>,
    /// `[N, 6A, gz, gy, gx]`, channel `a·6 + k`.
    pub reg: Tensor<T>,
}

impl<T: Real> DetectorNet<T> {
    pub fn new(config: &DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let mut blocks = Vec::new();
        let block = |ci, co, k, s, p, rng: &mut _| Block {
            conv: Conv3d::new(ci, co, k, s, p, false, Init::He, rng),
            bn: BatchNorm3d::new(co),
        };
        let mut c = 1;
        for stage in 0..3 {
            let co = w << stage;
            blocks.push(block(c, co, 2, 2, 0, rng));
            c = co;
            for _ in 0..config.blocks_per_stage {
                blocks.push(block(c, c, 3, 1, 1, rng));
            }
        }
        let a = config.anchor_sides.len();
        let mut cls = Conv3d::new(c, a, 1, 1, 0, true, Init::Normal(0.01), rng);
        // start from a low foreground prior
        let prior = T::lit(-(99.0f64).ln());
        if let Some(b) = cls.bias.as_mut() {
            b.value.iter_mut().for_each(|v| *v = prior);
        }
        let reg = Conv3d::new(c, 6 * a, 1, 1, 0, true, Init::Normal(0.01), rng);
        Ok(Self { blocks, cls, reg, n_anchors: a })
    }

    /// Feature-grid size for an input of spatial shape `dims`.
    pub fn grid(dims: [usize; 3]) -> [usize; 3] {
        dims.map(|d| d / STRIDE)
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<DetectorTrace<T>> {
        if x.channels() != 1 {
            return Err(Error::InvalidArgument(format!("detector expects 1 channel, got {}", x.channels())));
        }
        if x.spatial().iter().any(|&d| d < STRIDE) {
            return Err(Error::InvalidArgument(format!(
                "input {:?} is smaller than the minimum {STRIDE}³",
                x.spatial()
            )));
        }
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &mut self.blocks {
            let pre_bn = b.conv.forward(&h);
            let (pre, cache) = b.bn.forward(&pre_bn, train);
            let out = Tensor::from_vec(pre.shape(), relu(pre.data()));
            traces.push(BlockTrace { input: h, cache, pre });
            h = out;
        }
        Ok(DetectorTrace {
            cls: self.cls.forward(&h),
            reg: self.reg.forward(&h),
            blocks: traces,
            features: h,
        })
    }

    /// Accumulate parameter gradients for head-output gradients.
    pub fn backward(&mut self, trace: &DetectorTrace<T>, d_cls: &Tensor<T>, d_reg: &Tensor<T>) {
        let mut d = self.cls.backward(&trace.features, d_cls, true).expect("dx requested");
        let d2 = self.reg.backward(&trace.features, d_reg, true).expect("dx requested");
        d.data_mut().iter_mut().zip(d2.data()).for_each(|(a, b)| *a += *b);
        for (i, (b, t)) in self.blocks.iter_mut().zip(&trace.blocks).enumerate().rev() {
            let d_pre = Tensor::from_vec(t.pre.shape(), relu_backward(d.data(), t.pre.data()));
            let d_conv = b.bn.backward(&t.cache, &d_pre);
            match b.conv.backward(&t.input, &d_conv, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl<T: Real> Parameterized<T> for DetectorNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(b.conv.params());
            v.extend(b.bn.params());
        }
        v.extend(self.cls.params());
        v.extend(self.reg.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.conv.params_mut());
            v.extend(b.bn.params_mut());
        }
        v.extend(self.cls.params_mut());
        v.extend(self.reg.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Vec<T>> {
        self.blocks.iter().flat_map(|b| b.bn.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.blocks.iter_mut().flat_map(|b| b.bn.buffers_mut()).collect()
    }
}
