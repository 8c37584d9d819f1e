//! Deterministic random stream: xoshiro256++ seeded through SplitMix64.
//!
//! Both algorithms are public-domain references (Blackman & Vigna). The
//! stream is pure integer arithmetic, so identical seeds produce
//! bit-identical sequences on every platform.

/// Seeded pseudo-random stream.
#[derive(Debug, Clone)]
pub struct RandomStream {
    state: [u64; 4],
    cached_normal: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut s = seed ^ stream.wrapping_mul(0xA24B_AED4_963E_E407);
    splitmix64(&mut s);
    splitmix64(&mut s)
}

fn rotl(x: u64, k: u32) -> u64 {
    x.rotate_left(k)
}

impl RandomStream {
    pub fn new(seed: u64) -> RandomStream {
        let mut s = seed;
        let state = [
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
        ];
        RandomStream {
            state,
            cached_normal: None,
        }
    }

    /// xoshiro256++ step.
    pub fn next_u64(&mut self) -> u64 {
        let [s0, s1, s2, s3] = self.state;
        let result = rotl(s0.wrapping_add(s3), 23).wrapping_add(s0);
        let t = s1 << 17;
        let mut n2 = s2 ^ s0;
        let mut n3 = s3 ^ s1;
        let n1 = s1 ^ n2;
        let n0 = s0 ^ n3;
        n2 ^= t;
        n3 = rotl(n3, 45);
        self.state = [n0, n1, n2, n3];
        result
    }

    /// Uniform in [0, 1) with 53 significant bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform integer in [0, n). Modulo bias is irrelevant at the n used here.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; the paired variate is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| self.next_normal() * scale).collect()
    }
}
