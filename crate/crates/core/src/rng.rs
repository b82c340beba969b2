//! Portable deterministic random number generation.
//!
//! All randomness in this crate flows through [`Rng`], a xoshiro256** generator
//! seeded from a 64-bit seed via splitmix64. The bit stream is fully specified
//! by the two algorithms and therefore identical across platforms and builds,
//! which is what makes datasets and training runs reproducible from a seed.
//! The platform default RNG is never used.

/// xoshiro256** seeded via splitmix64.
///
/// `u64` outputs are exactly the reference xoshiro256** sequence. Derived
/// samples (floats, ranges, shuffles, normals) are defined in terms of that
/// stream using the documented constructions below, so they are portable too.
#[derive(Clone, Debug)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    /// Expands `seed` into the 256-bit state with four splitmix64 steps.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut next = || {
            sm = sm.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^ (z >> 31)
        };
        Rng {
            state: [next(), next(), next(), next()],
        }
    }

    /// Derives an independent generator; `stream` selects the child.
    pub fn child(&self, stream: u64) -> Rng {
        let mut r = self.clone();
        let a = r.next_u64();
        Rng::from_seed(a ^ stream.wrapping_mul(0x9e3779b97f4a7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform f64 in [0, 1): top 53 bits scaled by 2^-53.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n) by 53-bit float scaling. `n` must be > 0 and
    /// small relative to 2^53, which holds for every use in this crate.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let v = (self.uniform() * n as f64) as usize;
        v.min(n - 1)
    }

    /// Inclusive integer range.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(hi >= lo);
        lo + self.below(hi - lo + 1)
    }

    /// Fisher-Yates shuffle, back to front.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Unit vector sampled by rejection from the unit disc; avoids
    /// transcendentals so the result is bit-stable across platforms.
    pub fn unit_vec2(&mut self) -> (f64, f64) {
        loop {
            let x = self.uniform_in(-1.0, 1.0);
            let y = self.uniform_in(-1.0, 1.0);
            let n2 = x * x + y * y;
            if n2 > 1e-12 && n2 <= 1.0 {
                let n = n2.sqrt();
                return (x / n, y / n);
            }
        }
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per pair; the
    /// second value of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        // Marsaglia polar form: rejection only, no trig.
        loop {
            let u = self.uniform_in(-1.0, 1.0);
            let v = self.uniform_in(-1.0, 1.0);
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                return u * f;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_sequence() {
        // xoshiro256** state [1,2,3,4] produces this prefix (reference impl).
        let mut r = Rng { state: [1, 2, 3, 4] };
        let got: Vec<u64> = (0..5).map(|_| r.next_u64()).collect();
        assert_eq!(
            got,
            vec![11520, 0, 1509978240, 1215971899390074240, 1216172134540287360]
        );
    }

    #[test]
    fn splitmix_seeding_vector() {
        // from_seed(7) expands through splitmix64; prefix frozen from the
        // reference implementations of both algorithms.
        let mut r = Rng::from_seed(7);
        assert_eq!(r.next_u64(), 12923355070828475994);
        assert_eq!(r.next_u64(), 5142052590334782674);
        assert_eq!(r.next_u64(), 15488392906492639638);
    }

    #[test]
    fn deterministic_from_seed() {
        let mut a = Rng::from_seed(7);
        let mut b = Rng::from_seed(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::from_seed(8);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn uniform_bounds() {
        let mut r = Rng::from_seed(42);
        for _ in 0..10_000 {
            let x = r.uniform();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn below_covers_range() {
        let mut r = Rng::from_seed(1);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[r.below(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::from_seed(3);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
