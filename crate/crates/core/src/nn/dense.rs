use super::{gemm, Init, Param, Parameterized, Real, Tensor};
use rand::Rng;

/// Fully connected layer over the flattened per-sample features.
#[derive(Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, init: Init, rng: &mut impl Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::normal(in_features * out_features, init.std(in_features), rng),
            bias: Param::zeros(out_features),
        }
    }

    /// Output shape `[batch, out, 1, 1, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.forward_linear(x);
        for n in 0..y.batch() {
            for (v, b) in y.sample_mut(n).iter_mut().zip(&self.bias.value) {
                *v += *b;
            }
        }
        y
    }

    pub fn forward_linear(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.sample_len(), self.in_features, "linear input size mismatch");
        let mut y = Tensor::zeros([x.batch(), self.out_features, 1, 1, 1]);
        gemm(false, true, x.batch(), self.in_features, self.out_features, T::one(), x.data(), &self.weight.value, T::zero(), y.data_mut());
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool) -> Option<Tensor<T>> {
        self.backward_impl(x, dy, want_dx, true)
    }

    pub fn backward_linear(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool) -> Option<Tensor<T>> {
        self.backward_impl(x, dy, want_dx, false)
    }

    pub fn backward_data(&self, input_shape: [usize; 5], dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(input_shape);
        gemm(false, false, dy.batch(), self.out_features, self.in_features, T::one(), dy.data(), &self.weight.value, T::zero(), dx.data_mut());
        dx
    }

    fn backward_impl(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool, with_bias: bool) -> Option<Tensor<T>> {
        self.weight.zero_grad_if_unsized();
        self.bias.zero_grad_if_unsized();
        let b = x.batch();
        // dW (out × in) += dyᵀ · x
        gemm(true, false, self.out_features, b, self.in_features, T::one(), dy.data(), x.data(), T::one(), &mut self.weight.grad);
        if with_bias {
            for n in 0..b {
                for (g, d) in self.bias.grad.iter_mut().zip(dy.sample(n)) {
                    *g += *d;
                }
            }
        }
        want_dx.then(|| self.backward_data(x.shape(), dy))
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
