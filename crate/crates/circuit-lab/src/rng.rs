//! Deterministic pseudo-random numbers.
//!
//! Everything stochastic in this crate (weight init, corpus synthesis,
//! shuffling, splits) flows through [`Rng`], a splitmix64 generator. The
//! sequence for a given seed is frozen by tests, so any artifact produced
//! from a seed is reproducible bit for bit across runs and platforms.

/// splitmix64 generator.
///
/// State advances by the golden-ratio increment; output is the finalizer of
/// the advanced state. Passes BigCrush, has a full 2^64 period, and is
/// trivially seedable from any u64 (including 0).
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in the half-open-from-below interval (0, 1]: the top 53
    /// bits are mapped to (0, 1] so the result is never zero and can feed a
    /// logarithm directly.
    pub fn next_unit(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) by rejection from the top of the range,
    /// so every value is exactly equally likely. `bound` must be non-zero.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below requires a positive bound");
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }

    /// Standard normal draw via Box–Muller. Consumes exactly two raw u64
    /// outputs per call, which keeps downstream sequences aligned no matter
    /// which of the two transforms a caller discards.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_unit();
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Derive an independent stream for a named stage of a larger run, so
    /// adding a stage never perturbs the draws of existing stages.
    pub fn derive(master_seed: u64, stage: &str) -> Self {
        let mut h = master_seed ^ 0x853C_49E6_748F_EA9B;
        for &b in stage.as_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
            h ^= h >> 29;
        }
        // One warm-up step decorrelates nearby seeds.
        let mut rng = Rng::new(h);
        rng.next_u64();
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference outputs for the splitmix64 finalizer, computed with an
    // independent implementation.
    #[test]
    fn matches_reference_sequence_seed_0() {
        let mut rng = Rng::new(0);
        let got: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                16294208416658607535,
                7960286522194355700,
                487617019471545679,
                17909611376780542444,
            ]
        );
    }

    #[test]
    fn matches_reference_sequence_seed_1234567() {
        let mut rng = Rng::new(1234567);
        let got: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                6457827717110365317,
                3203168211198807973,
                9817491932198370423,
                4593380528125082431,
            ]
        );
    }

    #[test]
    fn matches_reference_sequence_seed_deadbeef() {
        let mut rng = Rng::new(0xDEAD_BEEF);
        let got: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                5395234354446855067,
                16021672434157553954,
                153047824787635229,
                8387618351419058064,
            ]
        );
    }

    #[test]
    fn unit_draw_matches_reference_and_stays_in_range() {
        // First draw for seed 42 is 13679457532755275413, whose top 53 bits
        // map to this unit value.
        let mut rng = Rng::new(42);
        let u = rng.next_unit();
        assert!((u - 0.7415648787718233).abs() < 1e-15);

        let mut rng = Rng::new(7);
        for _ in 0..10_000 {
            let u = rng.next_unit();
            assert!(u > 0.0 && u <= 1.0);
        }
    }

    #[test]
    fn next_below_is_in_range_and_hits_all_values() {
        let mut rng = Rng::new(3);
        let mut seen = [false; 7];
        for _ in 0..1_000 {
            let v = rng.next_below(7) as usize;
            assert!(v < 7);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn normal_draws_have_sane_moments_and_fixed_consumption() {
        let mut rng = Rng::new(11);
        let n = 50_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");

        // Exactly two raw outputs per draw: interleaving draws must land on
        // the same raw stream positions as consuming pairs by hand.
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        a.next_normal();
        let after_one = a.next_u64();
        b.next_u64();
        b.next_u64();
        assert_eq!(after_one, b.next_u64());
    }

    #[test]
    fn shuffle_is_deterministic_and_a_permutation() {
        let mut rng = Rng::new(5);
        let mut v: Vec<u32> = (0..10).collect();
        rng.shuffle(&mut v);
        let mut rng2 = Rng::new(5);
        let mut v2: Vec<u32> = (0..10).collect();
        rng2.shuffle(&mut v2);
        assert_eq!(v, v2);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_ne!(v, (0..10).collect::<Vec<_>>(), "seed 5 should permute");
    }

    #[test]
    fn derived_streams_differ_by_stage_and_are_stable() {
        let a1 = Rng::derive(42, "corpus").next_u64();
        let a2 = Rng::derive(42, "corpus").next_u64();
        let b = Rng::derive(42, "train").next_u64();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
    }
}
