//! Counter-based random numbers.
//!
//! Every random number the renderer consumes is a pure function of
//! `(seed namespace, pixel x, pixel y, sample index, bounce, dimension)`.
//! No state is carried between draws, so the value a pixel sees never depends
//! on which thread, tile or process rendered it.

/// Global pixel coordinates plus the global sample index of one camera path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleKey {
    pub seed: u64,
    pub px: u32,
    pub py: u32,
    pub sample: u32,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SampleKey {
    pub fn new(seed: u64, px: u32, py: u32, sample: u32) -> SampleKey {
        SampleKey { seed, px, py, sample }
    }

    #[inline]
    fn path_hash(&self) -> u64 {
        let mut h = mix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        h = mix64(h ^ (((self.px as u64) << 32) | self.py as u64));
        mix64(h ^ self.sample as u64)
    }

    /// Raw 64-bit draw for `(bounce, dim)`.
    #[inline]
    pub fn bits(&self, bounce: u32, dim: u32) -> u64 {
        let h = self.path_hash();
        mix64(h ^ (((bounce as u64) << 32) | dim as u64).wrapping_mul(0xd6e8_feb8_6659_fd93))
    }

    /// Uniform float in `[0, 1)` with 24 bits of resolution.
    #[inline]
    pub fn uniform(&self, bounce: u32, dim: u32) -> f32 {
        (self.bits(bounce, dim) >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    pub fn stream(&self, bounce: u32) -> DimStream {
        DimStream { hash: self.path_hash(), bounce, next_dim: 0 }
    }
}

/// Draws successive dimensions of one bounce.
#[derive(Debug, Clone)]
pub struct DimStream {
    hash: u64,
    bounce: u32,
    next_dim: u32,
}

impl DimStream {
    #[inline]
    pub fn next(&mut self) -> f32 {
        let key = ((self.bounce as u64) << 32) | self.next_dim as u64;
        self.next_dim += 1;
        let bits = mix64(self.hash ^ key.wrapping_mul(0xd6e8_feb8_6659_fd93));
        (bits >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    #[inline]
    pub fn next2(&mut self) -> (f32, f32) {
        let a = self.next();
        (a, self.next())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_matches_direct_draws() {
        let key = SampleKey::new(7, 10, 20, 3);
        let mut s = key.stream(2);
        for d in 0..8 {
            assert_eq!(s.next().to_bits(), key.uniform(2, d).to_bits());
        }
    }

    #[test]
    fn draws_are_in_unit_interval_and_roughly_uniform() {
        let mut sum = 0.0f64;
        let n = 100_000u32;
        for i in 0..n {
            let u = SampleKey::new(1, i % 317, i / 317, i).uniform(0, 0);
            assert!((0.0..1.0).contains(&u));
            sum += u as f64;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn every_key_component_changes_the_draw() {
        let base = SampleKey::new(1, 2, 3, 4);
        let v = base.bits(5, 6);
        assert_ne!(v, SampleKey::new(9, 2, 3, 4).bits(5, 6));
        assert_ne!(v, SampleKey::new(1, 9, 3, 4).bits(5, 6));
        assert_ne!(v, SampleKey::new(1, 2, 9, 4).bits(5, 6));
        assert_ne!(v, SampleKey::new(1, 2, 3, 9).bits(5, 6));
        assert_ne!(v, base.bits(9, 6));
        assert_ne!(v, base.bits(5, 9));
        // px and py are not interchangeable
        assert_ne!(SampleKey::new(1, 2, 3, 4).bits(0, 0), SampleKey::new(1, 3, 2, 4).bits(0, 0));
    }
}
