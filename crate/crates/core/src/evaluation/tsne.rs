//! Exact t-SNE for small image sets.

use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 100.0,
            iterations: 1000,
            seed: 0,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsnePoint {
    pub x: f64,
    pub y: f64,
    pub category: String,
}

pub fn tsne_csv(points: &[TsnePoint]) -> String {
    let mut s = String::from("x,y,category\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.x, p.y, p.category);
    }
    s
}

/// Rescale an image to `[0, 1]` by its own range (constant images map to 0).
fn unit_range(img: &[f32]) -> Vec<f64> {
    let (lo, hi) = img
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo) as f64;
    img.iter()
        .map(|&v| if span > 0.0 { (v - lo) as f64 / span } else { 0.0 })
        .collect()
}

/// Row-conditional affinities for one point with the bandwidth found by
/// bisection on the entropy.
fn conditional_row(dist: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let n = dist.len();
    let target = perplexity.ln();
    let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
    let mut row = vec![0.0; n];
    // shift by the nearest neighbour so exp() never underflows to all zeros
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    for _ in 0..200 {
        let mut sum = 0.0;
        for j in 0..n {
            row[j] = if j == i { 0.0 } else { (-(dist[j] - dmin) * beta).exp() };
            sum += row[j];
        }
        let mut h = 0.0;
        for j in 0..n {
            if j != i {
                row[j] /= sum;
                if row[j] > 0.0 {
                    h -= row[j] * row[j].ln();
                }
            }
        }
        let diff = h - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    row
}

/// 2-D embedding of equally sized images (one point per image, input order).
pub fn tsne_embed(images: &[Vec<f32>], config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = images.len();
    if !(config.perplexity > 0.0) || config.perplexity >= n as f64 {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} must be positive and below the image count {n}",
            config.perplexity
        )));
    }
    if images.iter().any(|im| im.len() != images[0].len()) {
        return Err(Error::InvalidArgument("t-SNE images must share one size".into()));
    }
    let xs: Vec<Vec<f64>> = images.iter().map(|im| unit_range(im)).collect();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = xs[i].iter().zip(&xs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = conditional_row(&dist[i * n..(i + 1) * n], i, config.perplexity);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..config.iterations {
        let exaggeration = if it < config.exaggeration_iterations { config.early_exaggeration } else { 1.0 };
        let momentum = if it < config.exaggeration_iterations { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                let q = 1.0 / (1.0 + dy[0] * dy[0] + dy[1] * dy[1]);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggeration * sym[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                grad[0] += 4.0 * w * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                let same_sign = (grad[a] > 0.0) == (velocity[i][a] > 0.0);
                gains[i][a] = if same_sign { (gains[i][a] * 0.8f64).max(0.01) } else { gains[i][a] + 0.2 };
                velocity[i][a] = momentum * velocity[i][a] - config.learning_rate * gains[i][a] * grad[a];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        let mean = y.iter().fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]);
        for p in &mut y {
            p[0] -= mean[0] / n as f64;
            p[1] -= mean[1] / n as f64;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn shape_determinism_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<Vec<f32>> = (0..30).map(|_| (0..64).map(|_| rng.random::<f32>()).collect()).collect();
        let small = || TsneConfig {
            perplexity: 5.0,
            iterations: 200,
            seed: 3,
            ..TsneConfig::default()
        };
        let a = tsne_embed(&imgs, &small()).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a, tsne_embed(&imgs, &small()).unwrap());
        let cfg = TsneConfig { perplexity: 30.0, ..small() };
        assert!(matches!(tsne_embed(&imgs, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn duplicates_coincide_and_clusters_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut imgs: Vec<Vec<f32>> = (0..300)
            .map(|i| {
                let class = (i % 3) as f32;
                (0..512).map(|k| class * ((k + i % 3) % 3) as f32 + rng.random_range(0.0..0.5f32)).collect()
            })
            .collect();
        imgs.push(imgs[4].clone());
        let y = tsne_embed(&imgs, &TsneConfig { seed: 3, ..TsneConfig::default() }).unwrap();
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!(d(y[4], y[300]) < 1e-3, "{}", d(y[4], y[300]));
        let centroid = |class: usize| {
            let pts: Vec<_> = (0..300).filter(|i| i % 3 == class).map(|i| y[i]).collect();
            let s = pts.iter().fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]);
            [s[0] / pts.len() as f64, s[1] / pts.len() as f64]
        };
        let spread = (0..300).filter(|i| i % 3 == 0).map(|i| d(y[i], centroid(0))).fold(0.0, f64::max);
        assert!(d(centroid(0), centroid(1)) > spread);
        assert!(d(centroid(0), centroid(2)) > spread);
    }

    #[test]
    fn csv_layout() {
        let s = tsne_csv(&[TsnePoint { x: 0.5, y: -1.0, category: "real".into() }]);
        assert_eq!(s, "x,y,category\n0.5,-1,real\n");
    }
}
