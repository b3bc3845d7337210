//! Seeded sampling helpers shared by the estimators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::structure::Point;

pub type SampleRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SampleRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Axis-aligned chart box `max_i |x_i - center_i| <= half_width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: Vec<f64>,
    pub half_width: f64,
}

impl Region {
    pub fn unit(n: usize) -> Self {
        Self::centered(n, 1.0)
    }

    pub fn centered(n: usize, half_width: f64) -> Self {
        Self {
            center: vec![0.0; n],
            half_width,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Point {
        Point::from_iterator(
            self.dim(),
            self.center
                .iter()
                .map(|c| c + self.half_width * rng.gen_range(-1.0..=1.0)),
        )
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(&self.center)
            .all(|(x, c)| (x - c).abs() <= self.half_width)
    }
}

/// Uniform sample of the cube `[-1, 1]^n`.
pub fn unit_cube(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}
