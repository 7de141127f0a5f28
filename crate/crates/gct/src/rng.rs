//! Counter-based splittable RNG.
//!
//! Every random decision in the crate draws from a stream addressed by
//! `(seed, tag, parts...)`, so table construction, encounter sampling, label
//! injection, parameter init, dropout, and batch order are all independently
//! reproducible regardless of evaluation order or thread count.

/// Purpose tag separating otherwise identically-keyed streams.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StreamTag {
    TableRow,
    TablePermute,
    TableScalar,
    Encounter,
    Split,
    Init,
    Dropout,
    BatchShuffle,
    MaskChoice,
    EvalMask,
    RandomAdj,
    Repeat,
}

impl StreamTag {
    fn id(self) -> u64 {
        match self {
            StreamTag::TableRow => 1,
            StreamTag::TablePermute => 2,
            StreamTag::TableScalar => 3,
            StreamTag::Encounter => 4,
            StreamTag::Split => 5,
            StreamTag::Init => 6,
            StreamTag::Dropout => 7,
            StreamTag::BatchShuffle => 8,
            StreamTag::MaskChoice => 9,
            StreamTag::EvalMask => 10,
            StreamTag::RandomAdj => 11,
            StreamTag::Repeat => 12,
        }
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn scramble(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// splitmix64 stream seeded from a `(seed, tag, parts...)` key.
#[derive(Clone, Debug)]
pub struct StreamRng {
    state: u64,
}

impl StreamRng {
    pub fn new(seed: u64, tag: StreamTag, parts: &[u64]) -> Self {
        let mut s = scramble(seed ^ GOLDEN);
        s = scramble(s ^ scramble(tag.id().wrapping_mul(GOLDEN)));
        for &p in parts {
            s = scramble(s ^ scramble(p.wrapping_add(GOLDEN)));
        }
        StreamRng { state: s }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        scramble(self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a denominator.
    pub fn uniform_open(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Shifted Pareto draw `(1/U)^(1/alpha) - 1`, support [0, inf).
    pub fn pareto(&mut self, alpha: f64) -> f64 {
        let u = self.uniform_open();
        u.powf(-1.0 / alpha) - 1.0
    }

    /// Box-Muller normal draw.
    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + sd * z
    }

    /// Unbiased integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let rem = 0u64.wrapping_sub(n) % n;
        loop {
            let v = self.next_u64();
            if rem == 0 || v < 0u64.wrapping_sub(rem) {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Index draw from a normalized probability row. Accumulated float slop
    /// falls through to the last entry with positive mass.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        debug_assert!(!probs.is_empty());
        let u = self.uniform();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                acc += p;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}
