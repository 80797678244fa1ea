use super::Real;
use rand::Rng;

pub fn leaky_relu<T: Real>(x: &[T], slope: T) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect()
}

/// Gradient through a leaky rectifier given its *input* (or output: the sign
/// is the same for positive slopes).
pub fn leaky_relu_backward<T: Real>(dy: &[T], x: &[T], slope: T) -> Vec<T> {
    dy.iter()
        .zip(x)
        .map(|(&g, &v)| if v > T::zero() { g } else { g * slope })
        .collect()
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

pub fn relu_backward<T: Real>(dy: &[T], x: &[T]) -> Vec<T> {
    dy.iter()
        .zip(x)
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn tanh<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Gradient through `tanh` given its output `y`.
pub fn tanh_backward<T: Real>(dy: &[T], y: &[T]) -> Vec<T> {
    dy.iter().zip(y).map(|(&g, &v)| g * (T::one() - v * v)).collect()
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, otherwise `1/(1-p)`.
pub fn dropout_mask<T: Real>(len: usize, p: f64, rng: &mut impl Rng) -> Vec<T> {
    assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dropout_keeps_expected_fraction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m: Vec<f64> = dropout_mask(20_000, 0.5, &mut rng);
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / 20_000.0;
        assert!((kept - 0.5).abs() < 0.02);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
