use super::{Param, Parameterized, Real, Tensor};

/// Per-channel batch normalisation over `(batch, z, y, x)`.
#[derive(Debug)]
pub struct BatchNorm3d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Real> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::zeros(channels),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalise `x`. In training mode batch statistics are used and the
    /// running estimates updated; otherwise the running estimates are used.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, BatchNormCache<T>) {
        let c = self.channels();
        assert_eq!(x.channels(), c, "batch-norm channel mismatch");
        let plane = x.plane();
        let count = (x.batch() * plane) as f64;
        let eps = T::lit(self.eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            for n in 0..x.batch() {
                for (ch, chunk) in x.sample(n).chunks(plane).enumerate() {
                    mean[ch] += chunk.iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= T::lit(count));
            for n in 0..x.batch() {
                for (ch, chunk) in x.sample(n).chunks(plane).enumerate() {
                    let m = mean[ch];
                    var[ch] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= T::lit(count));
            let mom = T::lit(self.momentum);
            let unbias = if count > 1.0 { T::lit(count / (count - 1.0)) } else { T::one() };
            for ch in 0..c {
                self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean[ch];
                self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(&self.running_mean);
            var.copy_from_slice(&self.running_var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            let src = x.sample(n);
            let xh = xhat.sample_mut(n);
            for ch in 0..c {
                for i in ch * plane..(ch + 1) * plane {
                    xh[i] = (src[i] - mean[ch]) * inv_std[ch];
                }
            }
            let out = y.sample_mut(n);
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for i in ch * plane..(ch + 1) * plane {
                    out[i] = g * xh[i] + b;
                }
            }
        }
        (
            y,
            BatchNormCache {
                xhat: xhat.into_vec(),
                inv_std,
                train,
            },
        )
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let c = self.channels();
        let plane = dy.plane();
        let batch = dy.batch();
        let sample_len = dy.sample_len();
        self.gamma.zero_grad_if_unsized();
        self.beta.zero_grad_if_unsized();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for n in 0..batch {
            let g = dy.sample(n);
            let xh = &cache.xhat[n * sample_len..(n + 1) * sample_len];
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                sum_dy[ch] += g[r.clone()].iter().copied().sum::<T>();
                sum_dy_xhat[ch] += g[r.clone()].iter().zip(&xh[r]).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch];
            self.beta.grad[ch] += sum_dy[ch];
        }
        let mut dx = Tensor::zeros(dy.shape());
        let m = T::lit((batch * plane) as f64);
        for n in 0..batch {
            let g = dy.sample(n);
            let xh = &cache.xhat[n * sample_len..(n + 1) * sample_len];
            let out = dx.sample_mut(n);
            for ch in 0..c {
                let scale = self.gamma.value[ch] * cache.inv_std[ch];
                let r = ch * plane..(ch + 1) * plane;
                if cache.train {
                    let (sd, sdx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                    for i in r {
                        out[i] = scale * (g[i] - sd - xh[i] * sdx);
                    }
                } else {
                    for i in r {
                        out[i] = scale * g[i];
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for BatchNorm3d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Vec<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_output_is_standardised() {
        let mut bn = BatchNorm3d::<f64>::new(2);
        let x = Tensor::from_vec([2, 2, 1, 1, 3], (0..12).map(|v| (v * v) as f64).collect());
        let (y, _) = bn.forward(&x, true);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.sample(n)[ch * 3..ch * 3 + 3].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 6.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm3d::<f64>::new(2);
        bn.gamma.value = vec![1.5, -0.7];
        bn.beta.value = vec![0.2, 0.1];
        let x = Tensor::from_vec([2, 2, 1, 2, 2], (0..16).map(|v| ((v * 7) % 5) as f64 * 0.3 + v as f64 * 0.01).collect());
        let w: Vec<f64> = (0..16).map(|v| (v as f64 * 0.37).sin()).collect();
        let obj = |bn: &mut BatchNorm3d<f64>, x: &Tensor<f64>| {
            let (y, _) = bn.forward(x, true);
            y.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = bn.forward(&x, true);
        bn.gamma.zero_grad();
        bn.beta.zero_grad();
        let dx = bn.backward(&cache, &Tensor::from_vec(x.shape(), w.clone()));
        for i in 0..16 {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-6;
            let fd = (obj(&mut bn, &xp) - obj(&mut bn, &xm)) / 2e-6;
            assert!((fd - dx.data()[i]).abs() < 1e-6, "dx[{i}]");
        }
        let gg = bn.gamma.grad[1];
        bn.gamma.value[1] += 1e-6;
        let a = obj(&mut bn, &x);
        bn.gamma.value[1] -= 2e-6;
        let b = obj(&mut bn, &x);
        assert!(((a - b) / 2e-6 - gg).abs() < 1e-6);
    }
}
