use super::{gemm, Init, Param, Parameterized, Real, Tensor};
use rand::Rng;
use std::cell::RefCell;

/// Geometry of a cubic-kernel 3-D convolution with uniform stride and padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Geometry of a forward convolution over `input`.
    pub fn forward(channels: usize, input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Self {
        let out = |n: usize| {
            let padded = n + 2 * pad;
            assert!(
                padded >= kernel,
                "kernel {kernel} larger than padded extent {padded}"
            );
            (padded - kernel) / stride + 1
        };
        Self {
            channels,
            input,
            kernel,
            stride,
            pad,
            output: [out(input[0]), out(input[1]), out(input[2])],
        }
    }

    pub fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the unfolded (im2col) matrix.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    /// Valid output index range along one axis for kernel offset `koff`.
    fn valid_range(&self, axis: usize, koff: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let p = self.pad as isize;
        let k = koff as isize;
        let n = self.input[axis] as isize;
        let o = self.output[axis] as isize;
        // o*s + k - p >= 0  ->  o >= ceil((p - k) / s)
        let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
        // o*s + k - p <= n - 1  ->  o <= floor((n - 1 + p - k) / s)
        let hi_num = n - 1 + p - k;
        let hi = if hi_num < 0 { -1 } else { (hi_num / s).min(o - 1) };
        let lo = lo.min(o);
        if hi < lo {
            (lo as usize, lo as usize)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    /// Unfold `x` (`channels × input`) into `cols` (`col_rows × out_plane`).
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let [d, h, w] = self.input;
        let [_, oh, ow] = self.output;
        let k = self.kernel;
        let s = self.stride;
        let p = self.pad;
        let op = self.out_plane();
        debug_assert_eq!(x.len(), self.channels * d * h * w);
        debug_assert!(cols.len() >= self.col_rows() * op);
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &x[c * d * h * w..(c + 1) * d * h * w];
            for kz in 0..k {
                let (z0, z1) = self.valid_range(0, kz);
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(1, ky);
                    for kx in 0..k {
                        let (x0, x1) = self.valid_range(2, kx);
                        let dst = &mut cols[row * op..(row + 1) * op];
                        row += 1;
                        if z0 >= z1 || y0 >= y1 || x0 >= x1 {
                            dst.fill(T::zero());
                            continue;
                        }
                        dst[..z0 * oh * ow].fill(T::zero());
                        dst[z1 * oh * ow..].fill(T::zero());
                        for oz in z0..z1 {
                            let iz = oz * s + kz - p;
                            let zrow = &mut dst[oz * oh * ow..(oz + 1) * oh * ow];
                            zrow[..y0 * ow].fill(T::zero());
                            zrow[y1 * ow..].fill(T::zero());
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                let line = &mut zrow[oy * ow..(oy + 1) * ow];
                                line[..x0].fill(T::zero());
                                line[x1..].fill(T::zero());
                                if s == 1 {
                                    let ix0 = x0 + kx - p;
                                    line[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                                } else {
                                    for (ox, v) in line[x0..x1].iter_mut().enumerate() {
                                        *v = src[(ox + x0) * s + kx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold `cols` back into `x`, accumulating overlapping contributions.
    pub fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let [d, h, w] = self.input;
        let [_, oh, ow] = self.output;
        let k = self.kernel;
        let s = self.stride;
        let p = self.pad;
        let op = self.out_plane();
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
            for kz in 0..k {
                let (z0, z1) = self.valid_range(0, kz);
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(1, ky);
                    for kx in 0..k {
                        let (x0, x1) = self.valid_range(2, kx);
                        let src = &cols[row * op..(row + 1) * op];
                        row += 1;
                        for oz in z0..z1 {
                            let iz = oz * s + kz - p;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                let line = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                for ox in x0..x1 {
                                    dst[ox * s + kx - p] += line[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn scratch<T: Real>(cell: &RefCell<Vec<T>>, len: usize) -> std::cell::RefMut<'_, Vec<T>> {
    let mut buf = cell.borrow_mut();
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    buf
}

/// Cubic-kernel 3-D convolution. Weight layout `[out, in, k, k, k]`.
#[derive(Debug)]
pub struct Conv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cols: RefCell<Vec<T>>,
}

impl<T: Real> Conv3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.pow(3);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::normal(out_channels * fan_in, init.std(fan_in), rng),
            bias: bias.then(|| Param::zeros(out_channels)),
            cols: RefCell::new(Vec::new()),
        }
    }

    pub fn geom(&self, input: [usize; 3]) -> ConvGeom {
        ConvGeom::forward(self.in_channels, input, self.kernel, self.stride, self.pad)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_impl(x, true)
    }

    /// Forward pass without the bias term (the linear part of the layer).
    pub fn forward_linear(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_impl(x, false)
    }

    fn forward_impl(&self, x: &Tensor<T>, with_bias: bool) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "conv input channel mismatch");
        let g = self.geom(x.spatial());
        let op = g.out_plane();
        let rows = g.col_rows();
        let mut y = Tensor::zeros([x.batch(), self.out_channels, g.output[0], g.output[1], g.output[2]]);
        let pointwise = self.kernel == 1 && self.stride == 1 && self.pad == 0;
        for n in 0..x.batch() {
            let out = y.sample_mut(n);
            if pointwise {
                gemm(false, false, self.out_channels, rows, op, T::one(), &self.weight.value, x.sample(n), T::zero(), out);
            } else {
                let mut cols = scratch(&self.cols, rows * op);
                g.im2col(x.sample(n), &mut cols);
                gemm(false, false, self.out_channels, rows, op, T::one(), &self.weight.value, &cols, T::zero(), out);
            }
            if let (true, Some(b)) = (with_bias, &self.bias) {
                for (co, chunk) in out.chunks_mut(op).enumerate() {
                    let bv = b.value[co];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    /// Accumulate parameter gradients for upstream gradient `dy` at input `x`
    /// and return the input gradient when requested.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool) -> Option<Tensor<T>> {
        self.backward_impl(x, dy, want_dx, true)
    }

    /// Backward of [`Conv3d::forward_linear`]: the bias receives no gradient.
    pub fn backward_linear(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool) -> Option<Tensor<T>> {
        self.backward_impl(x, dy, want_dx, false)
    }

    /// Input gradient only; parameter gradients are left untouched.
    pub fn backward_data(&self, input_shape: [usize; 5], dy: &Tensor<T>) -> Tensor<T> {
        let g = self.geom([input_shape[2], input_shape[3], input_shape[4]]);
        let mut dx = Tensor::zeros(input_shape);
        for n in 0..dy.batch() {
            self.input_grad(&g, dy.sample(n), dx.sample_mut(n));
        }
        dx
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn input_grad(&self, g: &ConvGeom, dy: &[T], dx: &mut [T]) {
        let (op, rows) = (g.out_plane(), g.col_rows());
        if self.is_pointwise() {
            gemm(true, false, rows, self.out_channels, op, T::one(), &self.weight.value, dy, T::zero(), dx);
        } else {
            let mut cols = scratch(&self.cols, rows * op);
            // dcols = Wᵀ · dY
            gemm(true, false, rows, self.out_channels, op, T::one(), &self.weight.value, dy, T::zero(), &mut cols);
            dx.fill(T::zero());
            g.col2im(&cols[..rows * op], dx);
        }
    }

    fn backward_impl(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool, with_bias: bool) -> Option<Tensor<T>> {
        let g = self.geom(x.spatial());
        let op = g.out_plane();
        let rows = g.col_rows();
        assert_eq!(dy.shape(), [x.batch(), self.out_channels, g.output[0], g.output[1], g.output[2]]);
        self.weight.zero_grad_if_unsized();
        if let Some(b) = self.bias.as_mut() {
            b.zero_grad_if_unsized();
        }
        let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
        for n in 0..x.batch() {
            let dyn_ = dy.sample(n);
            if with_bias {
                if let Some(b) = self.bias.as_mut() {
                    for (co, chunk) in dyn_.chunks(op).enumerate() {
                        b.grad[co] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            if self.is_pointwise() {
                gemm(false, true, self.out_channels, op, rows, T::one(), dyn_, x.sample(n), T::one(), &mut self.weight.grad);
            } else {
                let mut cols = scratch(&self.cols, rows * op);
                g.im2col(x.sample(n), &mut cols);
                // dW += dY · colsᵀ
                gemm(false, true, self.out_channels, op, rows, T::one(), dyn_, &cols, T::one(), &mut self.weight.grad);
            }
            if let Some(dx) = dx.as_mut() {
                self.input_grad(&g, dyn_, dx.sample_mut(n));
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for Conv3d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Cubic-kernel 3-D transposed convolution. Weight layout `[in, out, k, k, k]`.
///
/// Output extent per axis is `(n - 1)·stride − 2·pad + kernel`.
#[derive(Debug)]
pub struct ConvTranspose3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cols: RefCell<Vec<T>>,
}

impl<T: Real> ConvTranspose3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.pow(3) / stride.pow(3).max(1);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::normal(in_channels * out_channels * kernel.pow(3), init.std(fan_in), rng),
            bias: bias.then(|| Param::zeros(out_channels)),
            cols: RefCell::new(Vec::new()),
        }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        input.map(|n| (n - 1) * self.stride + self.kernel - 2 * self.pad)
    }

    /// The forward-convolution geometry this layer transposes.
    fn geom(&self, input: [usize; 3]) -> ConvGeom {
        let out = self.output_dims(input);
        let g = ConvGeom::forward(self.out_channels, out, self.kernel, self.stride, self.pad);
        debug_assert_eq!(g.output, input);
        g
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "deconv input channel mismatch");
        let g = self.geom(x.spatial());
        let ip = g.out_plane();
        let rows = g.col_rows();
        let [d, h, w] = g.input;
        let mut y = Tensor::zeros([x.batch(), self.out_channels, d, h, w]);
        let plane = d * h * w;
        for n in 0..x.batch() {
            let mut cols = scratch(&self.cols, rows * ip);
            // cols = Wᵀ · x
            gemm(true, false, rows, self.in_channels, ip, T::one(), &self.weight.value, x.sample(n), T::zero(), &mut cols);
            let out = y.sample_mut(n);
            g.col2im(&cols[..rows * ip], out);
            if let Some(b) = &self.bias {
                for (co, chunk) in out.chunks_mut(plane).enumerate() {
                    let bv = b.value[co];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    /// Input gradient only.
    pub fn backward_data(&self, input_shape: [usize; 5], dy: &Tensor<T>) -> Tensor<T> {
        let g = self.geom([input_shape[2], input_shape[3], input_shape[4]]);
        let (ip, rows) = (g.out_plane(), g.col_rows());
        let mut dx = Tensor::zeros(input_shape);
        for n in 0..dy.batch() {
            let mut cols = scratch(&self.cols, rows * ip);
            g.im2col(dy.sample(n), &mut cols);
            gemm(false, false, self.in_channels, rows, ip, T::one(), &self.weight.value, &cols, T::zero(), dx.sample_mut(n));
        }
        dx
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool) -> Option<Tensor<T>> {
        let g = self.geom(x.spatial());
        let ip = g.out_plane();
        let rows = g.col_rows();
        let plane = g.in_plane();
        self.weight.zero_grad_if_unsized();
        let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
        for n in 0..x.batch() {
            let dyn_ = dy.sample(n);
            if let Some(b) = self.bias.as_mut() {
                b.zero_grad_if_unsized();
                for (co, chunk) in dyn_.chunks(plane).enumerate() {
                    b.grad[co] += chunk.iter().copied().sum::<T>();
                }
            }
            let mut cols = scratch(&self.cols, rows * ip);
            g.im2col(dyn_, &mut cols);
            // dW (in × rows) += x · colsᵀ
            gemm(false, true, self.in_channels, ip, rows, T::one(), x.sample(n), &cols, T::one(), &mut self.weight.grad);
            if let Some(dx) = dx.as_mut() {
                gemm(false, false, self.in_channels, rows, ip, T::one(), &self.weight.value, &cols, T::zero(), dx.sample_mut(n));
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for ConvTranspose3d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

impl<T: Real> Param<T> {
    pub(crate) fn zero_grad_if_unsized(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![T::zero(); self.value.len()];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], out_c: usize) -> Vec<f64> {
        let [d, h, wd] = g.input;
        let [od, oh, ow] = g.output;
        let k = g.kernel;
        let mut y = vec![0.0; out_c * od * oh * ow];
        for co in 0..out_c {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((c * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * g.channels + c) * k + kz) * k + ky) * k + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[((co * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p, dims) in &[(4, 2, 1, [6, 5, 8]), (3, 1, 1, [4, 4, 3]), (2, 2, 0, [4, 6, 4]), (3, 2, 1, [5, 7, 6]), (1, 1, 0, [2, 3, 4])] {
            let mut conv = Conv3d::<f64>::new(2, 3, k, s, p, false, Init::Normal(0.5), &mut rng);
            conv.weight.value = rand_vec(conv.weight.len(), &mut rng);
            let x = Tensor::from_vec([1, 2, dims[0], dims[1], dims[2]], rand_vec(2 * dims.iter().product::<usize>(), &mut rng));
            let y = conv.forward(&x);
            let want = naive_conv(x.data(), &conv.geom(dims), &conv.weight.value, 3);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, dx> for a bias-free conv, and dW matches FD.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv3d::<f64>::new(2, 3, 4, 2, 1, true, Init::Normal(0.3), &mut rng);
        let x = Tensor::from_vec([2, 2, 6, 4, 6], rand_vec(2 * 2 * 144, &mut rng));
        let y = conv.forward_linear(&x);
        let dy = Tensor::from_vec(y.shape(), rand_vec(y.data().len(), &mut rng));
        conv.zero_grad();
        let dx = conv.backward(&x, &dy, true).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        // weight gradient: d<conv(x),dy>/dW is linear, so FD is exact up to rounding
        let grad = conv.weight.grad.clone();
        for idx in [0, 7, 50, conv.weight.len() - 1] {
            let h = 1e-6;
            conv.weight.value[idx] += h;
            let up: f64 = conv.forward_linear(&x).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            conv.weight.value[idx] -= 2.0 * h;
            let dn: f64 = conv.forward_linear(&x).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            conv.weight.value[idx] += h;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-6, "dW[{idx}] fd {fd} vs {}", grad[idx]);
        }
        let bias_grad = conv.bias.as_ref().unwrap().grad.clone();
        let plane = y.plane();
        for co in 0..3 {
            let want: f64 = (0..2).map(|n| dy.sample(n)[co * plane..(co + 1) * plane].iter().sum::<f64>()).sum();
            assert!((bias_grad[co] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(k, s, p, dims) in &[(4, 2, 1, [3, 2, 4]), (2, 2, 0, [2, 3, 2]), (3, 1, 1, [3, 3, 4])] {
            let mut up = ConvTranspose3d::<f64>::new(3, 2, k, s, p, false, Init::Normal(0.5), &mut rng);
            let out_dims = up.output_dims(dims);
            // a 2 -> 3 conv shares the [3, 2, k, k, k] weight layout
            let mut down = Conv3d::<f64>::new(2, 3, k, s, p, false, Init::Normal(0.5), &mut rng);
            down.weight.value = up.weight.value.clone();
            let x = Tensor::from_vec([1, 3, dims[0], dims[1], dims[2]], rand_vec(3 * dims.iter().product::<usize>(), &mut rng));
            let z = Tensor::from_vec([1, 2, out_dims[0], out_dims[1], out_dims[2]], rand_vec(2 * out_dims.iter().product::<usize>(), &mut rng));
            let ux = up.forward(&x);
            let dz = down.forward(&z);
            assert_eq!(dz.spatial(), dims);
            let lhs: f64 = ux.data().iter().zip(z.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dz.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
            // backward of the transposed conv is the conv forward
            up.zero_grad();
            let dx = up.backward(&x, &z, true).unwrap();
            for (a, b) in dx.data().iter().zip(dz.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut up = ConvTranspose3d::<f64>::new(2, 2, 4, 2, 1, true, Init::Normal(0.5), &mut rng);
        let x = Tensor::from_vec([2, 2, 2, 3, 2], rand_vec(48, &mut rng));
        let y = up.forward(&x);
        let dy = Tensor::from_vec(y.shape(), rand_vec(y.data().len(), &mut rng));
        up.zero_grad();
        up.backward(&x, &dy, false);
        let obj = |u: &ConvTranspose3d<f64>| u.forward(&x).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>();
        for idx in [0, 13, 64, up.weight.len() - 1] {
            let g = up.weight.grad[idx];
            up.weight.value[idx] += 1e-6;
            let a = obj(&up);
            up.weight.value[idx] -= 2e-6;
            let b = obj(&up);
            up.weight.value[idx] += 1e-6;
            assert!(((a - b) / 2e-6 - g).abs() < 1e-6);
        }
        let bg = up.bias.as_ref().unwrap().grad[1];
        let b = up.bias.as_mut().unwrap();
        b.value[1] += 1e-6;
        let a = obj(&up);
        up.bias.as_mut().unwrap().value[1] -= 2e-6;
        let c = obj(&up);
        assert!(((a - c) / 2e-6 - bg).abs() < 1e-6);
    }
}
