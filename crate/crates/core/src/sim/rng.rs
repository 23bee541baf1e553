//! Per-replication random streams and the samplers built on them.
//!
//! Every replication gets its own ChaCha8 stream: the key is derived from the
//! master seed and the scenario hash, the stream id is the replication index.
//! Draws are therefore independent of scheduling and thread count. All
//! distributions are built from uniforms with elementary functions only.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_from(seed: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut state = seed;
    for chunk in key.chunks_exact_mut(8) {
        state = mix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

pub struct SimRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SimRng {
    /// Stream for replication `rep` of the scenario with hash `scenario_hash`.
    pub fn for_replication(master_seed: u64, scenario_hash: u64, rep: u64) -> Self {
        let mut inner = ChaCha8Rng::from_seed(key_from(mix64(master_seed) ^ scenario_hash));
        inner.set_stream(rep);
        Self {
            inner,
            spare_normal: None,
        }
    }

    pub fn seed_from_u64(seed: u64) -> Self {
        Self::for_replication(seed, 0, 0)
    }

    /// Uniform on the open interval (0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by the Marsaglia polar method.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s >= 1.0 || s == 0.0 {
                continue;
            }
            let f = (-2.0 * s.ln() / s).sqrt();
            self.spare_normal = Some(v * f);
            return u * f;
        }
    }

    /// Exp(1) by inversion.
    pub fn exp1(&mut self) -> f64 {
        -self.uniform().ln()
    }

    /// Chi-square with an even number of degrees of freedom `2m`:
    /// `-2 * sum(ln U_j)` over `m` uniforms.
    pub fn chi2_even(&mut self, df: u32) -> f64 {
        debug_assert!(df.is_multiple_of(2) && df > 0);
        let m = df / 2;
        -2.0 * (0..m).map(|_| self.uniform().ln()).sum::<f64>()
    }

    /// Student t with 3 degrees of freedom: `Z / sqrt(chi2_3 / 3)`,
    /// `chi2_3 = chi2_2 + Z'^2`.
    pub fn t3(&mut self) -> f64 {
        let z = self.normal();
        let z2 = self.normal();
        let chi3 = self.chi2_even(2) + z2 * z2;
        z / (chi3 / 3.0).sqrt()
    }
}
