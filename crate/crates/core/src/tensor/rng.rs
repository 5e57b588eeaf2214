use super::{Real, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Counter-based random stream.
///
/// Draw `i` of a stream is a pure function of `(key, i)`, so a stream can be
/// forked by label or index without consuming state from its parent, and the
/// `u64` sequence is identical on every platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed.wrapping_add(GOLDEN)),
            counter: 0,
        }
    }

    /// Independent child stream named by `label`.
    pub fn split(&self, label: &str) -> Rng {
        Rng {
            key: mix(self.key ^ mix(fnv1a(label.as_bytes()))),
            counter: 0,
        }
    }

    /// Independent child stream named by an integer (e.g. a training step).
    pub fn split_index(&self, index: u64) -> Rng {
        Rng {
            key: mix(self.key ^ mix(index.wrapping_mul(GOLDEN) ^ 0x5851_F42D_4C95_7F2D)),
            counter: 0,
        }
    }

    /// Value at draw position `index`, independent of the current counter.
    pub fn at(&self, index: u64) -> u64 {
        mix(mix(self.key.wrapping_add(index.wrapping_mul(GOLDEN))) ^ self.key)
    }

    pub fn draws(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        let n = n as u64;
        // Lemire's multiply-shift with rejection.
        let zone = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            let wide = u128::from(x) * u128::from(n);
            if (wide as u64) >= zone {
                return (wide >> 64) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller; consumes two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::lit(self.normal()))
    }

    pub fn uniform_tensor<T: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::lit(self.uniform_range(lo, hi)))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
