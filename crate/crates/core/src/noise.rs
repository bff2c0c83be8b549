//! Reproducible noise streams.
//!
//! Every simulated path owns two independent ChaCha streams, one for the
//! price noise and one for the factor innovations, keyed by
//! `(seed_base, path index, channel)`. Draws within a stream are consumed in
//! period order, so a path's noise never depends on which thread runs it or
//! on the policy being simulated.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::ModelParams;

const CHANNEL_EPS: u64 = 1;
const CHANNEL_OMEGA: u64 = 2;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream(seed_base: u64, path: u64, channel: u64) -> ChaCha8Rng {
    let key = splitmix64(seed_base ^ splitmix64(path.wrapping_add(1)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(channel);
    rng
}

/// Noise for one path: `eps_t ~ N(0, sigma_eps)`, `omega_t ~ N(0, Omega)`,
/// optionally truncated.
#[derive(Debug, Clone)]
pub struct PathNoise {
    eps_rng: ChaCha8Rng,
    omega_rng: ChaCha8Rng,
    eps_sd: f64,
    omega_chol: DMatrix<f64>,
    eps_bound: Option<f64>,
    c_omega: Option<f64>,
    checksum: u64,
}

impl PathNoise {
    pub fn new(params: &ModelParams, seed_base: u64, path: usize) -> Self {
        let k = params.k();
        let omega_chol = if k == 0 {
            DMatrix::zeros(0, 0)
        } else {
            params
                .factors
                .omega_cov
                .clone()
                .cholesky()
                .map(|c| c.l())
                .unwrap_or_else(|| DMatrix::zeros(k, k))
        };
        Self {
            eps_rng: stream(seed_base, path as u64, CHANNEL_EPS),
            omega_rng: stream(seed_base, path as u64, CHANNEL_OMEGA),
            eps_sd: params.noise.sigma_eps.sqrt(),
            omega_chol,
            eps_bound: params.noise.eps_bound,
            c_omega: params.factors.c_omega,
            checksum: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Next period's `(eps, omega)`.
    pub fn draw(&mut self) -> (f64, DVector<f64>) {
        let z: f64 = StandardNormal.sample(&mut self.eps_rng);
        let mut eps = self.eps_sd * z;
        if let Some(b) = self.eps_bound {
            eps = eps.clamp(-b, b);
        }
        let k = self.omega_chol.nrows();
        let w = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut self.omega_rng));
        let mut omega = &self.omega_chol * w;
        if let Some(c) = self.c_omega {
            let norm = omega.norm();
            if norm > c {
                omega *= c / norm;
            }
        }
        self.absorb(eps);
        for v in omega.iter() {
            self.absorb(*v);
        }
        (eps, omega)
    }

    fn absorb(&mut self, v: f64) {
        // FNV-1a over the bit pattern
        for byte in v.to_bits().to_le_bytes() {
            self.checksum ^= byte as u64;
            self.checksum = self.checksum.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }

    /// Running hash of every draw so far.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_keyed_by_path() {
        let p = ModelParams::desk_scale();
        let mut a = PathNoise::new(&p, 42, 0);
        let mut b = PathNoise::new(&p, 42, 0);
        let mut c = PathNoise::new(&p, 42, 1);
        let mut d = PathNoise::new(&p, 43, 0);
        let xs: Vec<_> = (0..10).map(|_| a.draw()).collect();
        let ys: Vec<_> = (0..10).map(|_| b.draw()).collect();
        assert_eq!(xs, ys);
        assert_eq!(a.checksum(), b.checksum());
        let zs: Vec<_> = (0..10).map(|_| c.draw()).collect();
        assert_ne!(xs, zs);
        let ws: Vec<_> = (0..10).map(|_| d.draw()).collect();
        assert_ne!(xs, ws);
    }

    #[test]
    fn moments_are_close_to_model() {
        let p = ModelParams::desk_scale();
        let mut n = PathNoise::new(&p, 1, 0);
        let count = 20000;
        let (mut se, mut so) = (0.0, 0.0);
        for _ in 0..count {
            let (e, o) = n.draw();
            se += e * e;
            so += o[1] * o[1];
        }
        assert!((se / count as f64 / 0.0013 - 1.0).abs() < 0.05);
        assert!((so / count as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn truncation_bounds_draws() {
        let mut p = ModelParams::desk_scale();
        p.noise.eps_bound = Some(0.01);
        p.factors.c_omega = Some(1.5);
        let mut n = PathNoise::new(&p, 9, 3);
        for _ in 0..2000 {
            let (e, o) = n.draw();
            assert!(e.abs() <= 0.01);
            assert!(o.norm() <= 1.5 + 1e-12);
        }
    }
}
