//! Deterministic point sets: Halton sequences and seeded uniform draws in balls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::field::norm;

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Van der Corput radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += (index % b) as f64 * f;
        index /= b;
        f *= inv;
    }
    r
}

/// The `index`-th Halton point in `[0, 1)^dim`.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "Halton sequence supports at most {} dimensions", PRIMES.len());
    PRIMES[..dim].iter().map(|&p| radical_inverse(index, p)).collect()
}

/// Uniform point in the annulus `inner <= |x| <= outer`.
pub fn uniform_in_annulus<R: Rng>(rng: &mut R, dim: usize, inner: f64, outer: f64) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&dir);
    let u: f64 = rng.random();
    let d = dim as f64;
    let r = (inner.powf(d) + u * (outer.powf(d) - inner.powf(d))).powf(1.0 / d);
    dir.iter_mut().for_each(|c| *c *= r / n);
    dir
}

/// Sampling law for pointwise certificates and sampled suprema.
///
/// Points are `count` Halton points accepted into the annulus
/// `inner_radius <= |x| <= radius`, then the origin when it lies in the
/// annulus, then `uniform_extra` seeded uniform points in the annulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub count: usize,
    pub radius: f64,
    #[serde(default)]
    pub inner_radius: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_uniform_extra")]
    pub uniform_extra: usize,
}

fn default_uniform_extra() -> usize {
    100
}

impl SampleSpec {
    pub fn ball(count: usize, radius: f64, seed: u64) -> Self {
        Self { count, radius, inner_radius: 0.0, seed, uniform_extra: default_uniform_extra() }
    }

    pub fn points(&self, dim: usize) -> Vec<Vec<f64>> {
        let (r_in, r_out) = (self.inner_radius, self.radius);
        let mut pts = Vec::with_capacity(self.count + self.uniform_extra + 1);
        let mut index = 1u64;
        while pts.len() < self.count {
            let p: Vec<f64> = halton(index, dim).iter().map(|u| (2.0 * u - 1.0) * r_out).collect();
            index += 1;
            let r = norm(&p);
            if r >= r_in && r <= r_out {
                pts.push(p);
            }
        }
        if r_in == 0.0 {
            pts.push(vec![0.0; dim]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        pts.extend((0..self.uniform_extra).map(|_| uniform_in_annulus(&mut rng, dim, r_in, r_out)));
        pts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert!((radical_inverse(5, 3) - (2.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn sample_spec_respects_annulus_and_is_deterministic() {
        let spec = SampleSpec { count: 500, radius: 3.0, inner_radius: 1.0, seed: 9, uniform_extra: 50 };
        let a = spec.points(2);
        let b = spec.points(2);
        assert_eq!(a, b);
        assert_eq!(a.len(), 550);
        assert!(a.iter().all(|p| (1.0..=3.0).contains(&norm(p))));
    }

    #[test]
    fn ball_spec_contains_origin() {
        let pts = SampleSpec::ball(10, 1.0, 0).points(3);
        assert_eq!(pts.len(), 111);
        assert!(pts.iter().any(|p| p.iter().all(|c| *c == 0.0)));
    }
}
