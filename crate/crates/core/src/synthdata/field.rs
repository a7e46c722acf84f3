use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stationary Gaussian-like random field with unit variance, built from random
/// Fourier features of a squared-exponential kernel.
#[derive(Debug, Clone)]
pub struct SmoothField {
    features: Vec<(f64, f64, f64)>,
    norm: f64,
}

impl SmoothField {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, correlation_len: f64, num_features: usize) -> Self {
        let features = (0..num_features)
            .map(|_| {
                let wy: f64 = StandardNormal.sample(rng);
                let wx: f64 = StandardNormal.sample(rng);
                let phase = rng.random_range(0.0..2.0 * PI);
                (wy / correlation_len, wx / correlation_len, phase)
            })
            .collect();
        Self {
            features,
            norm: (2.0 / num_features as f64).sqrt(),
        }
    }

    #[inline]
    pub fn at(&self, row: f64, col: f64) -> f64 {
        self.norm
            * self
                .features
                .iter()
                .map(|&(wy, wx, b)| (wy * row + wx * col + b).cos())
                .sum::<f64>()
    }
}

/// splitmix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn field_has_roughly_unit_variance() {
        let mut acc = 0.0;
        let mut n = 0.0;
        for s in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let f = SmoothField::new(&mut rng, 10.0, 64);
            for i in 0..10 {
                let v = f.at(i as f64 * 37.0, i as f64 * 11.0);
                acc += v * v;
                n += 1.0;
            }
        }
        let var = acc / n;
        assert!((0.7..1.3).contains(&var), "{var}");
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[5, 0, 3]), mix_seed(&[5, 0, 3]));
    }
}
