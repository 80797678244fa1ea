//! Generator, context discriminator and nodule critic.
//!
//! Shapes are contractual (generator `64³×7 → 32³×1`, context discriminator
//! `64³×1 →` patch grid, nodule critic `32³×7 →` one unbounded score);
//! kernel size and channel widths come from [`ArchConfig`].

use crate::nn::{
    dropout_mask, leaky_relu, leaky_relu_backward, relu, relu_backward, tanh, tanh_backward,
    BatchNorm3d, BatchNormCache, Conv3d, ConvTranspose3d, Init, Linear, Param, Parameterized,
    Real, Tensor,
};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of generator input channels: the VOI plus six condition planes.
pub const INPUT_CHANNELS: usize = 7;
pub use crate::volume::{NODULE_SIDE, VOI_SIDE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Channels of the first encoder stage; later stages double it.
    pub base_width: usize,
    /// Kernel of the strided stages (even, ≥ 2; padding is `(k − 2) / 2`).
    pub kernel: usize,
    /// Dropout on the first two decoder stages.
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Standard deviation of the normal weight initialisation.
    pub init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            kernel: 4,
            dropout: 0.5,
            leaky_slope: 0.2,
            init_std: 0.02,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel < 2 || self.kernel % 2 != 0 {
            return Err(Error::Configuration(format!(
                "strided kernel must be even and >= 2, got {}",
                self.kernel
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Configuration("base_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Configuration("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        (self.kernel - 2) / 2
    }
}

/// Whether layers use batch statistics/dropout (training) or running
/// statistics with dropout disabled (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

fn channel_count(x: &Tensor<impl Real>) -> usize {
    x.channels()
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// U-Net-like generator: four strided encoder stages down to a 4³
/// bottleneck, four transposed-convolution decoder stages with skip
/// connections, and a tanh head emitting the 32³ nodule only.
#[derive(Debug)]
pub struct Generator<T> {
    pub config: ArchConfig,
    enc_conv: Vec<Conv3d<T>>,
    enc_bn: Vec<BatchNorm3d<T>>,
    dec_conv: Vec<ConvTranspose3d<T>>,
    dec_bn: Vec<BatchNorm3d<T>>,
    head: ConvTranspose3d<T>,
}

/// Intermediate tensors of a generator forward pass.
pub struct GeneratorTrace<T> {
    input: Tensor<T>,
    enc_pre: Vec<Tensor<T>>,
    enc_bn: Vec<BatchNormCache<T>>,
    enc_out: Vec<Tensor<T>>,
    dec_in: Vec<Tensor<T>>,
    dec_bn_out: Vec<Tensor<T>>,
    dec_bn: Vec<BatchNormCache<T>>,
    dec_masks: Vec<Option<Vec<T>>>,
    output: Tensor<T>,
}

impl<T> GeneratorTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl<T: Real> Generator<T> {
    pub fn new(config: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let (k, p) = (config.kernel, config.pad());
        let init = Init::Normal(config.init_std);
        let enc_widths = [INPUT_CHANNELS, w, 2 * w, 4 * w, 8 * w];
        let mut enc_conv = Vec::new();
        let mut enc_bn = Vec::new();
        for i in 0..4 {
            enc_conv.push(Conv3d::new(enc_widths[i], enc_widths[i + 1], k, 2, p, false, init, rng));
            enc_bn.push(BatchNorm3d::new(enc_widths[i + 1]));
        }
        // decoder stage i consumes [previous stage (+ skip)] and upsamples by 2
        let dec_io = [(8 * w, 4 * w), (8 * w, 2 * w), (4 * w, w)];
        let mut dec_conv = Vec::new();
        let mut dec_bn = Vec::new();
        for &(ci, co) in &dec_io {
            dec_conv.push(ConvTranspose3d::new(ci, co, k, 2, p, false, init, rng));
            dec_bn.push(BatchNorm3d::new(co));
        }
        // last decoder stage keeps 32³ resolution
        let head = ConvTranspose3d::new(2 * w, 1, 3, 1, 1, true, init, rng);
        Ok(Self {
            config,
            enc_conv,
            enc_bn,
            dec_conv,
            dec_bn,
            head,
        })
    }

    pub fn check_input(x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s[1] != INPUT_CHANNELS || x.spatial() != [VOI_SIDE; 3] {
            return Err(Error::InvalidArgument(format!(
                "generator expects [N, 7, 64, 64, 64], got {s:?}"
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut impl Rng) -> Result<GeneratorTrace<T>> {
        Self::check_input(x)?;
        let train = mode == Mode::Train;
        let slope = T::lit(self.config.leaky_slope);
        let mut enc_pre = Vec::new();
        let mut enc_bn = Vec::new();
        let mut enc_out: Vec<Tensor<T>> = Vec::new();
        for i in 0..4 {
            let h = if i == 0 { x } else { &enc_out[i - 1] };
            let c = self.enc_conv[i].forward(h);
            let (b, cache) = self.enc_bn[i].forward(&c, train);
            let a = Tensor::from_vec(b.shape(), leaky_relu(b.data(), slope));
            enc_pre.push(b);
            enc_bn.push(cache);
            enc_out.push(a);
        }
        let mut dec_in = Vec::new();
        let mut dec_bn_out = Vec::new();
        let mut dec_bn = Vec::new();
        let mut dec_masks = Vec::new();
        let mut h = enc_out[3].clone();
        for i in 0..3 {
            let u = self.dec_conv[i].forward(&h);
            let (b, cache) = self.dec_bn[i].forward(&u, train);
            let mut a = relu(b.data());
            let mask = (train && i < 2 && self.config.dropout > 0.0).then(|| {
                let m = dropout_mask::<T>(a.len(), self.config.dropout, rng);
                a.iter_mut().zip(&m).for_each(|(v, k)| *v *= *k);
                m
            });
            let a = Tensor::from_vec(b.shape(), a);
            dec_in.push(h);
            dec_bn_out.push(b);
            dec_bn.push(cache);
            dec_masks.push(mask);
            h = Tensor::concat_channels(&a, &enc_out[2 - i]);
        }
        let out = self.head.forward(&h);
        let output = Tensor::from_vec(out.shape(), tanh(out.data()));
        dec_in.push(h);
        Ok(GeneratorTrace {
            input: x.clone(),
            enc_pre,
            enc_bn,
            enc_out,
            dec_in,
            dec_bn_out,
            dec_bn,
            dec_masks,
            output,
        })
    }

    /// Inference-mode output: `[N, 1, 32, 32, 32]`.
    pub fn generate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        // no randomness is consumed in inference mode
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(self.forward(x, Mode::Inference, &mut rng)?.output)
    }

    /// Accumulate parameter gradients for `d_out` (gradient w.r.t. the output).
    pub fn backward(&mut self, trace: &GeneratorTrace<T>, d_out: &Tensor<T>) {
        let slope = T::lit(self.config.leaky_slope);
        let du = Tensor::from_vec(d_out.shape(), tanh_backward(d_out.data(), trace.output.data()));
        let mut d_h = self.head.backward(&trace.dec_in[3], &du, true).expect("dx requested");
        // skip gradients arriving at each encoder output
        let mut d_enc: Vec<Tensor<T>> = trace.enc_out.iter().map(|e| Tensor::zeros(e.shape())).collect();
        for i in (0..3).rev() {
            let act_channels = channel_count(&trace.dec_bn_out[i]);
            let (mut d_a, d_skip) = d_h.split_channels(act_channels);
            add_assign(&mut d_enc[2 - i], &d_skip);
            if let Some(mask) = &trace.dec_masks[i] {
                d_a.data_mut().iter_mut().zip(mask).for_each(|(g, m)| *g *= *m);
            }
            let d_b = Tensor::from_vec(d_a.shape(), relu_backward(d_a.data(), trace.dec_bn_out[i].data()));
            let d_u = self.dec_bn[i].backward(&trace.dec_bn[i], &d_b);
            d_h = self.dec_conv[i].backward(&trace.dec_in[i], &d_u, true).expect("dx requested");
        }
        add_assign(&mut d_enc[3], &d_h);
        for i in (0..4).rev() {
            let d_b = Tensor::from_vec(
                d_enc[i].shape(),
                leaky_relu_backward(d_enc[i].data(), trace.enc_pre[i].data(), slope),
            );
            let d_c = self.enc_bn[i].backward(&trace.enc_bn[i], &d_b);
            let input = if i == 0 { &trace.input } else { &trace.enc_out[i - 1] };
            if let Some(d_in) = self.enc_conv[i].backward(input, &d_c, i > 0) {
                add_assign(&mut d_enc[i - 1], &d_in);
            }
        }
    }
}

impl<T: Real> Parameterized<T> for Generator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for (c, b) in self.enc_conv.iter().zip(&self.enc_bn) {
            v.extend(c.params());
            v.extend(b.params());
        }
        for (c, b) in self.dec_conv.iter().zip(&self.dec_bn) {
            v.extend(c.params());
            v.extend(b.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for (c, b) in self.enc_conv.iter_mut().zip(&mut self.enc_bn) {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        for (c, b) in self.dec_conv.iter_mut().zip(&mut self.dec_bn) {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Vec<T>> {
        self.enc_bn.iter().chain(&self.dec_bn).flat_map(|b| b.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.enc_bn
            .iter_mut()
            .chain(self.dec_bn.iter_mut())
            .flat_map(|b| b.buffers_mut())
            .collect()
    }
}

fn add_assign<T: Real>(acc: &mut Tensor<T>, x: &Tensor<T>) {
    assert_eq!(acc.shape(), x.shape());
    acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += *b);
}

// ---------------------------------------------------------------------------
// Context discriminator (LSGAN)
// ---------------------------------------------------------------------------

/// Judges a composited 64³ VOI. Four strided stages (batch norm on all but
/// the first) followed by a stride-1 projection to a 4³ patch grid.
#[derive(Debug)]
pub struct ContextDiscriminator<T> {
    pub config: ArchConfig,
    convs: Vec<Conv3d<T>>,
    bns: Vec<BatchNorm3d<T>>,
    head: Conv3d<T>,
}

pub struct ContextTrace<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    bn: Vec<Option<BatchNormCache<T>>>,
    head_in: Tensor<T>,
    output: Tensor<T>,
}

impl<T> ContextTrace<T> {
    /// Patch scores `[N, 1, 4, 4, 4]`.
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl<T: Real> ContextDiscriminator<T> {
    pub fn new(config: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let (k, p) = (config.kernel, config.pad());
        let init = Init::Normal(config.init_std);
        let widths = [1, w, 2 * w, 4 * w, 8 * w];
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for i in 0..4 {
            convs.push(Conv3d::new(widths[i], widths[i + 1], k, 2, p, i == 0, init, rng));
            if i > 0 {
                bns.push(BatchNorm3d::new(widths[i + 1]));
            }
        }
        let head = Conv3d::new(8 * w, 1, 3, 1, 1, true, init, rng);
        Ok(Self {
            config,
            convs,
            bns,
            head,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ContextTrace<T>> {
        if x.channels() != 1 || x.spatial() != [VOI_SIDE; 3] {
            return Err(Error::InvalidArgument(format!(
                "context discriminator expects [N, 1, 64, 64, 64], got {:?}",
                x.shape()
            )));
        }
        let train = mode == Mode::Train;
        let slope = T::lit(self.config.leaky_slope);
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut bn = Vec::new();
        let mut h = x.clone();
        for i in 0..4 {
            let c = self.convs[i].forward(&h);
            let (b, cache) = if i == 0 {
                (c, None)
            } else {
                let (b, cache) = self.bns[i - 1].forward(&c, train);
                (b, Some(cache))
            };
            let a = Tensor::from_vec(b.shape(), leaky_relu(b.data(), slope));
            inputs.push(h);
            pre.push(b);
            bn.push(cache);
            h = a;
        }
        let output = self.head.forward(&h);
        Ok(ContextTrace {
            inputs,
            pre,
            bn,
            head_in: h,
            output,
        })
    }

    /// Backpropagate `d_out`; accumulates parameter gradients when
    /// `param_grads` is set and returns the input gradient when `want_dx`.
    pub fn backward(
        &mut self,
        trace: &ContextTrace<T>,
        d_out: &Tensor<T>,
        param_grads: bool,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let slope = T::lit(self.config.leaky_slope);
        let mut d_h = if param_grads {
            self.head.backward(&trace.head_in, d_out, true).expect("dx requested")
        } else {
            self.head.backward_data(trace.head_in.shape(), d_out)
        };
        for i in (0..4).rev() {
            let mut d_b = Tensor::from_vec(d_h.shape(), leaky_relu_backward(d_h.data(), trace.pre[i].data(), slope));
            if let Some(cache) = &trace.bn[i] {
                d_b = self.bns[i - 1].backward(cache, &d_b);
            }
            let need_dx = i > 0 || want_dx;
            if param_grads {
                match self.convs[i].backward(&trace.inputs[i], &d_b, need_dx) {
                    Some(d) => d_h = d,
                    None => return None,
                }
            } else if need_dx {
                d_h = self.convs[i].backward_data(trace.inputs[i].shape(), &d_b);
            } else {
                return None;
            }
        }
        Some(d_h)
    }
}

impl<T: Real> Parameterized<T> for ContextDiscriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = Vec::new();
        for c in &self.convs {
            v.extend(c.params());
        }
        for b in &self.bns {
            v.extend(b.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = Vec::new();
        for c in &mut self.convs {
            v.extend(c.params_mut());
        }
        for b in &mut self.bns {
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Vec<T>> {
        self.bns.iter().flat_map(|b| b.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.bns.iter_mut().flat_map(|b| b.buffers_mut()).collect()
    }
}

// ---------------------------------------------------------------------------
// Nodule critic (WGAN-GP)
// ---------------------------------------------------------------------------

/// Wasserstein critic over a nodule cube concatenated with the tiled
/// conditions. No normalisation layers, so samples are scored independently
/// and the network is piecewise linear in its input.
#[derive(Debug)]
pub struct NoduleCritic<T> {
    pub config: ArchConfig,
    pub input_side: usize,
    convs: Vec<Conv3d<T>>,
    head: Linear<T>,
}

pub struct CriticTrace<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    head_in: Tensor<T>,
    scores: Vec<T>,
}

impl<T: Real> CriticTrace<T> {
    pub fn scores(&self) -> &[T] {
        &self.scores
    }
}

impl<T: Real> NoduleCritic<T> {
    pub fn new(config: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::with_input_side(config, NODULE_SIDE, rng)
    }

    /// Critic for `side³` inputs (`side` divisible by 16); the production
    /// network uses 32, smaller sides serve gradient checks.
    pub fn with_input_side(config: ArchConfig, side: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if side % 16 != 0 || side == 0 {
            return Err(Error::Configuration(format!("critic input side {side} not divisible by 16")));
        }
        let w = config.base_width;
        let (k, p) = (config.kernel, config.pad());
        let init = Init::Normal(config.init_std);
        let widths = [INPUT_CHANNELS, w, 2 * w, 4 * w, 8 * w];
        let convs = (0..4)
            .map(|i| Conv3d::new(widths[i], widths[i + 1], k, 2, p, true, init, rng))
            .collect();
        let final_side = side / 16;
        let head = Linear::new(8 * w * final_side.pow(3), 1, init, rng);
        Ok(Self {
            config,
            input_side: side,
            convs,
            head,
        })
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != INPUT_CHANNELS || x.spatial() != [self.input_side; 3] {
            return Err(Error::InvalidArgument(format!(
                "nodule critic expects [N, 7, {s}, {s}, {s}], got {:?}",
                x.shape(),
                s = self.input_side
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<CriticTrace<T>> {
        self.check(x)?;
        let slope = T::lit(self.config.leaky_slope);
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut h = x.clone();
        for conv in &self.convs {
            let c = conv.forward(&h);
            let a = Tensor::from_vec(c.shape(), leaky_relu(c.data(), slope));
            inputs.push(h);
            pre.push(c);
            h = a;
        }
        let scores = self.head.forward(&h).into_vec();
        Ok(CriticTrace {
            inputs,
            pre,
            head_in: h,
            scores,
        })
    }

    pub fn scores(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.forward(x)?.scores)
    }

    /// Backpropagate per-sample score gradients `d_scores`.
    pub fn backward(
        &mut self,
        trace: &CriticTrace<T>,
        d_scores: &[T],
        param_grads: bool,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let slope = T::lit(self.config.leaky_slope);
        let dy = Tensor::from_vec([d_scores.len(), 1, 1, 1, 1], d_scores.to_vec());
        let mut d_h = if param_grads {
            self.head.backward(&trace.head_in, &dy, true).expect("dx requested")
        } else {
            self.head.backward_data(trace.head_in.shape(), &dy)
        };
        for i in (0..4).rev() {
            let d_c = Tensor::from_vec(d_h.shape(), leaky_relu_backward(d_h.data(), trace.pre[i].data(), slope));
            let need_dx = i > 0 || want_dx;
            if param_grads {
                match self.convs[i].backward(&trace.inputs[i], &d_c, need_dx) {
                    Some(d) => d_h = d,
                    None => return None,
                }
            } else if need_dx {
                d_h = self.convs[i].backward_data(trace.inputs[i].shape(), &d_c);
            } else {
                return None;
            }
        }
        Some(d_h)
    }

    /// Input gradient of each sample's score (`∇ₓ critic(x)`), one tensor
    /// per batch, without touching parameter gradients.
    pub fn input_gradient(&mut self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let trace = self.forward(x)?;
        let ones = vec![T::one(); x.batch()];
        let g = self.backward(&trace, &ones, false, true).expect("dx requested");
        Ok((trace.scores, g))
    }

    /// Gradient-penalty term `λ · mean((‖∇critic(x̂)‖₂ − 1)²)` at the given
    /// interpolates, accumulating its parameter gradient.
    ///
    /// The critic is piecewise linear, so with activation masks frozen at `x̂`
    /// the directional derivative `v · ∇critic(x̂)` equals the bias-free
    /// network applied to `v`. Backpropagating that tangent pass with
    /// `v = ∂penalty/∂∇critic` yields the exact parameter gradient.
    pub fn gradient_penalty_backward(&mut self, interpolates: &Tensor<T>, lambda: f64) -> Result<GradientPenalty> {
        let batch = interpolates.batch();
        let trace = self.forward(interpolates)?;
        let ones = vec![T::one(); batch];
        let grad = self.backward(&trace, &ones, false, true).expect("dx requested");
        let mut norms = Vec::with_capacity(batch);
        let mut tangent_in = Tensor::zeros(grad.shape());
        let scale = lambda / batch as f64;
        let mut penalty = 0.0;
        for n in 0..batch {
            let g = grad.sample(n);
            let norm = g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            penalty += scale * (norm - 1.0).powi(2);
            norms.push(norm);
            if norm > 0.0 {
                let coef = T::lit(scale * 2.0 * (norm - 1.0) / norm);
                for (t, v) in tangent_in.sample_mut(n).iter_mut().zip(g) {
                    *t = coef * *v;
                }
            }
        }
        // tangent forward with frozen masks
        let slope = T::lit(self.config.leaky_slope);
        let mut t_inputs = Vec::with_capacity(4);
        let mut t = tangent_in;
        for (conv, pre) in self.convs.iter().zip(&trace.pre) {
            let mut lin = conv.forward_linear(&t);
            lin.data_mut()
                .iter_mut()
                .zip(pre.data())
                .for_each(|(v, p)| {
                    if *p <= T::zero() {
                        *v *= slope
                    }
                });
            t_inputs.push(t);
            t = lin;
        }
        // backward of Σₙ sₙ through the tangent network
        let ones_t = Tensor::from_vec([batch, 1, 1, 1, 1], ones);
        let mut d_t = self.head.backward_linear(&t, &ones_t, true).expect("dx requested");
        for i in (0..4).rev() {
            let d_c = Tensor::from_vec(d_t.shape(), leaky_relu_backward(d_t.data(), trace.pre[i].data(), slope));
            match self.convs[i].backward_linear(&t_inputs[i], &d_c, i > 0) {
                Some(d) => d_t = d,
                None => break,
            }
        }
        Ok(GradientPenalty { penalty, norms })
    }
}

/// Value of the penalty term and the per-sample gradient norms it used.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPenalty {
    pub penalty: f64,
    pub norms: Vec<f64>,
}

impl<T: Real> Parameterized<T> for NoduleCritic<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = Vec::new();
        for c in &self.convs {
            v.extend(c.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = Vec::new();
        for c in &mut self.convs {
            v.extend(c.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ArchConfig {
        ArchConfig {
            base_width: 2,
            kernel: 2,
            ..ArchConfig::default()
        }
    }

    fn two_hot_input(size: usize, att: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let plane = VOI_SIDE.pow(3);
        let mut data = vec![0.0f32; INPUT_CHANNELS * plane];
        for v in &mut data[..plane] {
            *v = rng.random_range(-1.0..1.0);
        }
        for c in [1 + size, 4 + att] {
            data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = 1.0);
        }
        Tensor::from_vec([1, INPUT_CHANNELS, VOI_SIDE, VOI_SIDE, VOI_SIDE], data)
    }

    #[test]
    fn generator_shape_and_range_for_every_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Generator::<f32>::new(tiny(), &mut rng).unwrap();
        for size in 0..3 {
            for att in 0..3 {
                let x = two_hot_input(size, att, &mut rng);
                let y = g.generate(&x).unwrap();
                assert_eq!(y.shape(), [1, 1, NODULE_SIDE, NODULE_SIDE, NODULE_SIDE]);
                assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                let t = g.forward(&x, Mode::Train, &mut rng).unwrap();
                assert!(t.output().data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn inference_is_deterministic_and_input_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Generator::<f32>::new(tiny(), &mut rng).unwrap();
        let x = two_hot_input(1, 2, &mut rng);
        assert_eq!(g.generate(&x).unwrap(), g.generate(&x).unwrap());
        let bad = Tensor::<f32>::zeros([1, 6, 64, 64, 64]);
        assert!(matches!(g.generate(&bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn context_output_is_patch_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = ContextDiscriminator::<f32>::new(tiny(), &mut rng).unwrap();
        let x = Tensor::filled([2, 1, 64, 64, 64], 0.1f32);
        let t = d.forward(&x, Mode::Train).unwrap();
        assert_eq!(t.output().shape(), [2, 1, 4, 4, 4]);
    }

    fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn small_critic(rng: &mut ChaCha8Rng) -> NoduleCritic<f64> {
        let config = ArchConfig {
            base_width: 2,
            kernel: 2,
            init_std: 0.3,
            ..ArchConfig::default()
        };
        NoduleCritic::with_input_side(config, 16, rng).unwrap()
    }

    #[test]
    fn critic_input_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut critic = small_critic(&mut rng);
        let x = random_tensor([1, 7, 16, 16, 16], &mut rng);
        let (_, g) = critic.input_gradient(&x).unwrap();
        let h = 1e-3;
        for _ in 0..20 {
            let i = rng.random_range(0..x.data().len());
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (critic.scores(&xp).unwrap()[0] - critic.scores(&xm).unwrap()[0]) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-8), "{fd} vs {an}");
        }
    }

    #[test]
    fn penalty_parameter_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut critic = small_critic(&mut rng);
        let x = random_tensor([2, 7, 16, 16, 16], &mut rng);
        let lambda = 10.0;
        critic.zero_grad();
        let gp = critic.gradient_penalty_backward(&x, lambda).unwrap();
        assert!(gp.penalty.is_finite() && gp.norms.len() == 2);
        let analytic: Vec<Vec<f64>> = critic.params().iter().map(|p| p.grad.clone()).collect();
        let h = 1e-6;
        let mut checked = 0;
        for pi in 0..analytic.len() {
            for _ in 0..4 {
                let j = rng.random_range(0..analytic[pi].len());
                let orig = critic.params()[pi].value[j];
                critic.params_mut()[pi].value[j] = orig + h;
                let up = critic.gradient_penalty_backward(&x, lambda).unwrap().penalty;
                critic.params_mut()[pi].value[j] = orig - h;
                let down = critic.gradient_penalty_backward(&x, lambda).unwrap().penalty;
                critic.params_mut()[pi].value[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic[pi][j];
                let scale = fd.abs().max(an.abs());
                if scale < 1e-7 {
                    continue;
                }
                assert!((fd - an).abs() <= 1e-4 * scale, "param {pi}[{j}]: fd {fd} vs analytic {an}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn penalty_matches_the_norm_of_the_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut critic = small_critic(&mut rng);
        let x = random_tensor([1, 7, 16, 16, 16], &mut rng);
        let (_, g) = critic.input_gradient(&x).unwrap();
        let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let gp = critic.gradient_penalty_backward(&x, 10.0).unwrap();
        assert!((gp.penalty - 10.0 * (norm - 1.0).powi(2)).abs() < 1e-12);
    }
}
