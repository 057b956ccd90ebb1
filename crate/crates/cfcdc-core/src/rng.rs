//! Deterministic random number generation.
//!
//! A small splitmix64-based generator so that dataset synthesis,
//! parameter initialization, and dropout are byte-reproducible across
//! platforms and thread schedules. Streams can be derived from a parent
//! seed plus labels, which keeps per-example dropout independent of
//! iteration order.

use crate::mathx;

#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }

    /// Derive an independent stream from this seed and a list of labels.
    pub fn derive(seed: u64, labels: &[u64]) -> Self {
        let mut s = seed;
        for &l in labels {
            s = splitmix(s ^ l.wrapping_mul(0xff51_afd7_ed55_8ccd));
        }
        Rng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        splitmix(self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        mathx::sqrt(-2.0 * mathx::ln(u1)) * mathx::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Normal with given standard deviation.
    pub fn normal_scaled(&mut self, std: f64) -> f64 {
        self.normal() * std
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
