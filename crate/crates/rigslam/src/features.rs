//! Binary feature descriptors, matching, and a bag-of-words scene signature.
//!
//! Descriptors are opaque 256-bit codes. The vocabulary is a seeded
//! random-hyperplane quantizer into 2^10 words, so scene signatures are
//! deterministic functions of the seed and need no training data.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Number of hyperplanes in the quantizer; words are W-bit codes.
pub const VOCAB_HYPERPLANES: usize = 10;

/// Default matching thresholds: maximum Hamming distance and the
/// best/second-best ratio gate.
pub const DEFAULT_MAX_HAMMING: u32 = 50;
pub const DEFAULT_MATCH_RATIO: f64 = 0.8;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("descriptor hex must be 64 characters, got {0}")]
    BadHexLength(usize),
    #[error("invalid descriptor hex: {0}")]
    BadHexDigit(String),
}

/// 256-bit binary descriptor stored as four 64-bit words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryDescriptor(pub [u64; 4]);

impl BinaryDescriptor {
    pub fn zeros() -> Self {
        Self([0; 4])
    }

    pub fn ones() -> Self {
        Self([u64::MAX; 4])
    }

    pub fn random<R: rand::Rng>(rng: &mut R) -> Self {
        Self([rng.gen(), rng.gen(), rng.gen(), rng.gen()])
    }

    pub fn flip_bit(&mut self, bit: usize) {
        debug_assert!(bit < 256);
        self.0[bit / 64] ^= 1u64 << (bit % 64);
    }

    /// 64 lowercase hex characters, word 0 first, big-endian nibbles.
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for w in &self.0 {
            s.push_str(&format!("{w:016x}"));
        }
        s
    }

    pub fn from_hex(hex: &str) -> Result<Self, FeatureError> {
        if hex.len() != 64 {
            return Err(FeatureError::BadHexLength(hex.len()));
        }
        let mut words = [0u64; 4];
        for (i, word) in words.iter_mut().enumerate() {
            let chunk = &hex[i * 16..(i + 1) * 16];
            *word = u64::from_str_radix(chunk, 16)
                .map_err(|_| FeatureError::BadHexDigit(chunk.to_string()))?;
        }
        Ok(Self(words))
    }
}

/// Hamming distance: popcount of the XOR. Range [0, 256].
pub fn hamming(a: &BinaryDescriptor, b: &BinaryDescriptor) -> u32 {
    a.0.iter()
        .zip(b.0.iter())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum()
}

/// A 2D feature seen by one camera of the rig. `true_landmark_id` is
/// simulator ground truth carried for oracle checks only; the SLAM pipeline
/// never reads it.
#[derive(Clone, Debug)]
pub struct FeatureObservation {
    pub camera_id: usize,
    pub u: f64,
    pub v: f64,
    pub depth: Option<f64>,
    pub descriptor: BinaryDescriptor,
    pub true_landmark_id: Option<u64>,
}

/// Mutual-nearest-neighbor descriptor matching with a Hamming cap and a
/// best/second-best ratio gate. Returns (index in a, index in b) pairs; each
/// index appears at most once.
pub fn match_features(
    set_a: &[FeatureObservation],
    set_b: &[FeatureObservation],
    max_dist: u32,
    ratio: f64,
) -> Vec<(usize, usize)> {
    match_descriptors(
        &set_a.iter().map(|f| f.descriptor).collect::<Vec<_>>(),
        &set_b.iter().map(|f| f.descriptor).collect::<Vec<_>>(),
        max_dist,
        ratio,
    )
}

/// Descriptor-level matcher backing [`match_features`].
pub fn match_descriptors(
    set_a: &[BinaryDescriptor],
    set_b: &[BinaryDescriptor],
    max_dist: u32,
    ratio: f64,
) -> Vec<(usize, usize)> {
    if set_a.is_empty() || set_b.is_empty() {
        return Vec::new();
    }
    let forward: Vec<Option<(usize, u32)>> = set_a
        .iter()
        .map(|da| {
            let (best, second) = best_two(da, set_b);
            best.filter(|&(_, d)| d <= max_dist && (d as f64) < ratio * second as f64)
        })
        .collect();
    let backward: Vec<Option<usize>> = set_b
        .iter()
        .map(|db| best_two(db, set_a).0.map(|(i, _)| i))
        .collect();
    forward
        .iter()
        .enumerate()
        .filter_map(|(ia, m)| {
            let (ib, _) = (*m)?;
            (backward[ib] == Some(ia)).then_some((ia, ib))
        })
        .collect()
}

/// Best and second-best distances of `d` against `set`; ties keep the lower
/// index. The second-best defaults to "no competitor" (u32::MAX treated as
/// infinity by the ratio gate).
fn best_two(d: &BinaryDescriptor, set: &[BinaryDescriptor]) -> (Option<(usize, u32)>, u32) {
    let mut best: Option<(usize, u32)> = None;
    let mut second = u32::MAX;
    for (i, other) in set.iter().enumerate() {
        let dist = hamming(d, other);
        match best {
            Some((_, bd)) if dist < bd => {
                second = bd;
                best = Some((i, dist));
            }
            Some((_, bd)) => {
                if dist < second && dist >= bd {
                    second = dist;
                }
            }
            None => best = Some((i, dist)),
        }
    }
    (best, second)
}

/// Sparse, L2-normalized word-frequency vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BowVector {
    weights: BTreeMap<u32, f64>,
}

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = (&u32, &f64)> {
        self.weights.iter()
    }

    pub fn norm(&self) -> f64 {
        self.weights.values().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Cosine similarity in [0, 1]; zero when either vector is empty.
pub fn bow_similarity(a: &BowVector, b: &BowVector) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut dot = 0.0;
    for (word, wa) in a.weights.iter() {
        if let Some(wb) = b.weights.get(word) {
            dot += wa * wb;
        }
    }
    dot.clamp(0.0, 1.0)
}

/// Deterministic random-hyperplane quantizer. Each hyperplane is a random
/// 256-bit mask with threshold popcount(mask)/2; a descriptor's word is the
/// W-bit code of its per-hyperplane sides.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    seed: u64,
    masks: Vec<BinaryDescriptor>,
    thresholds: Vec<u32>,
}

impl Vocabulary {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<BinaryDescriptor> = (0..VOCAB_HYPERPLANES)
            .map(|_| BinaryDescriptor::random(&mut rng))
            .collect();
        let thresholds = masks
            .iter()
            .map(|m| m.0.iter().map(|w| w.count_ones()).sum::<u32>() / 2)
            .collect();
        Self {
            seed,
            masks,
            thresholds,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_count(&self) -> u32 {
        1 << VOCAB_HYPERPLANES
    }

    pub fn quantize(&self, d: &BinaryDescriptor) -> u32 {
        let mut word = 0u32;
        for (i, (mask, threshold)) in self.masks.iter().zip(&self.thresholds).enumerate() {
            let overlap: u32 = d
                .0
                .iter()
                .zip(mask.0.iter())
                .map(|(x, m)| (x & m).count_ones())
                .sum();
            if overlap > *threshold {
                word |= 1 << i;
            }
        }
        word
    }

    /// Term-frequency vector over quantized words, L2-normalized.
    pub fn bow_vector(&self, descriptors: &[BinaryDescriptor]) -> BowVector {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for d in descriptors {
            *counts.entry(self.quantize(d)).or_insert(0.0) += 1.0;
        }
        let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            for w in counts.values_mut() {
                *w /= norm;
            }
        }
        BowVector { weights: counts }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn obs(descriptor: BinaryDescriptor) -> FeatureObservation {
        FeatureObservation {
            camera_id: 0,
            u: 0.0,
            v: 0.0,
            depth: None,
            descriptor,
            true_landmark_id: None,
        }
    }

    #[test]
    fn hamming_basics() {
        let mut rng = StdRng::seed_from_u64(1);
        let d = BinaryDescriptor::random(&mut rng);
        assert_eq!(hamming(&d, &d), 0);
        assert_eq!(
            hamming(&BinaryDescriptor::zeros(), &BinaryDescriptor::ones()),
            256
        );
        // Flipping k distinct bits moves the distance by exactly k.
        for k in [1usize, 5, 37, 130] {
            let mut flipped = d;
            let mut chosen = std::collections::BTreeSet::new();
            while chosen.len() < k {
                chosen.insert(rng.gen_range(0..256usize));
            }
            for bit in &chosen {
                flipped.flip_bit(*bit);
            }
            assert_eq!(hamming(&d, &flipped), k as u32);
        }
    }

    #[test]
    fn hamming_triangle_inequality() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..500 {
            let a = BinaryDescriptor::random(&mut rng);
            let b = BinaryDescriptor::random(&mut rng);
            let c = BinaryDescriptor::random(&mut rng);
            assert!(hamming(&a, &c) <= hamming(&a, &b) + hamming(&b, &c));
            assert_eq!(hamming(&a, &b), hamming(&b, &a));
        }
    }

    #[test]
    fn hex_roundtrip() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let d = BinaryDescriptor::random(&mut rng);
            let hex = d.to_hex();
            assert_eq!(hex.len(), 64);
            assert_eq!(BinaryDescriptor::from_hex(&hex).unwrap(), d);
        }
        assert!(BinaryDescriptor::from_hex("abc").is_err());
        assert!(BinaryDescriptor::from_hex(&"g".repeat(64)).is_err());
    }

    #[test]
    fn identical_sets_match_identically() {
        let mut rng = StdRng::seed_from_u64(4);
        let set: Vec<FeatureObservation> = (0..100)
            .map(|_| obs(BinaryDescriptor::random(&mut rng)))
            .collect();
        let matches = match_features(&set, &set, DEFAULT_MAX_HAMMING, DEFAULT_MATCH_RATIO);
        assert_eq!(matches.len(), set.len());
        for (i, j) in matches {
            assert_eq!(i, j);
        }
    }

    #[test]
    fn disjoint_random_sets_rarely_match() {
        // Random 256-bit codes sit at expected distance 128 with sigma 8, so
        // a 50-bit cap leaves ~10 sigma of margin; over 1000 trials the
        // expected number of accidental matches is < 1e-15.
        let mut rng = StdRng::seed_from_u64(5);
        let mut total = 0;
        for _ in 0..1000 {
            let a: Vec<FeatureObservation> =
                (0..20).map(|_| obs(BinaryDescriptor::random(&mut rng))).collect();
            let b: Vec<FeatureObservation> =
                (0..20).map(|_| obs(BinaryDescriptor::random(&mut rng))).collect();
            total += match_features(&a, &b, DEFAULT_MAX_HAMMING, DEFAULT_MATCH_RATIO).len();
        }
        assert_eq!(total, 0);
    }

    #[test]
    fn noisy_matching_recovers_most_pairs() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut correct = 0usize;
        let mut reported = 0usize;
        for _ in 0..20 {
            let originals: Vec<BinaryDescriptor> =
                (0..200).map(|_| BinaryDescriptor::random(&mut rng)).collect();
            let set_a: Vec<FeatureObservation> =
                originals.iter().map(|d| obs(*d)).collect();
            let set_b: Vec<FeatureObservation> = originals
                .iter()
                .map(|d| {
                    let mut noisy = *d;
                    for _ in 0..5 {
                        noisy.flip_bit(rng.gen_range(0..256));
                    }
                    obs(noisy)
                })
                .collect();
            let matches =
                match_features(&set_a, &set_b, DEFAULT_MAX_HAMMING, DEFAULT_MATCH_RATIO);
            reported += matches.len();
            correct += matches.iter().filter(|(i, j)| i == j).count();
        }
        assert!(reported as f64 >= 0.95 * 20.0 * 200.0);
        assert!(correct as f64 >= 0.95 * reported as f64);
    }

    #[test]
    fn matching_is_partial_bijection() {
        let mut rng = StdRng::seed_from_u64(7);
        let a: Vec<FeatureObservation> =
            (0..150).map(|_| obs(BinaryDescriptor::random(&mut rng))).collect();
        let mut b: Vec<FeatureObservation> = a.iter().map(|f| obs(f.descriptor)).collect();
        // Duplicate some descriptors to stress the ratio / mutual gates.
        for i in 0..20 {
            let d = b[i].descriptor;
            b.push(obs(d));
        }
        let matches = match_features(&a, &b, DEFAULT_MAX_HAMMING, DEFAULT_MATCH_RATIO);
        let mut left = std::collections::BTreeSet::new();
        let mut right = std::collections::BTreeSet::new();
        for (i, j) in matches {
            assert!(left.insert(i), "duplicate left index {i}");
            assert!(right.insert(j), "duplicate right index {j}");
        }
    }

    #[test]
    fn bow_vector_basics() {
        let vocab = Vocabulary::new(42);
        assert!(vocab.bow_vector(&[]).is_empty());

        let mut rng = StdRng::seed_from_u64(8);
        let d = BinaryDescriptor::random(&mut rng);
        let single = vocab.bow_vector(&[d]);
        let entries: Vec<_> = single.words().collect();
        assert_eq!(entries.len(), 1);
        assert_abs_diff_eq!(*entries[0].1, 1.0, epsilon = 1e-12);

        // Duplicating the whole list leaves the normalized vector unchanged.
        let descs: Vec<BinaryDescriptor> =
            (0..50).map(|_| BinaryDescriptor::random(&mut rng)).collect();
        let once = vocab.bow_vector(&descs);
        let doubled: Vec<BinaryDescriptor> =
            descs.iter().chain(descs.iter()).copied().collect();
        let twice = vocab.bow_vector(&doubled);
        assert_eq!(once, twice);
        assert_abs_diff_eq!(once.norm(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn bow_vector_permutation_invariant_and_deterministic() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut descs: Vec<BinaryDescriptor> =
            (0..80).map(|_| BinaryDescriptor::random(&mut rng)).collect();
        let vocab = Vocabulary::new(7);
        let original = vocab.bow_vector(&descs);
        descs.reverse();
        assert_eq!(vocab.bow_vector(&descs), original);
        // Same seed, fresh vocabulary: identical quantization.
        let vocab2 = Vocabulary::new(7);
        assert_eq!(vocab2.bow_vector(&descs), original);
    }

    #[test]
    fn bow_similarity_cases() {
        let vocab = Vocabulary::new(11);
        let mut rng = StdRng::seed_from_u64(10);
        let descs: Vec<BinaryDescriptor> =
            (0..60).map(|_| BinaryDescriptor::random(&mut rng)).collect();
        let x = vocab.bow_vector(&descs);
        assert_abs_diff_eq!(bow_similarity(&x, &x), 1.0, epsilon = 1e-9);
        assert_eq!(bow_similarity(&x, &BowVector::default()), 0.0);
        assert_abs_diff_eq!(bow_similarity(&x, &vocab.bow_vector(&descs[..30])), {
            let y = vocab.bow_vector(&descs[..30]);
            bow_similarity(&y, &x)
        });

        // Hand case: equal-weight supports {w1, w2} and {w2, w3} overlap in
        // one of two words -> cosine 0.5. Construct via raw vectors.
        let a = BowVector {
            weights: [(1u32, 1.0 / 2f64.sqrt()), (2, 1.0 / 2f64.sqrt())]
                .into_iter()
                .collect(),
        };
        let b = BowVector {
            weights: [(2u32, 1.0 / 2f64.sqrt()), (3, 1.0 / 2f64.sqrt())]
                .into_iter()
                .collect(),
        };
        assert_abs_diff_eq!(bow_similarity(&a, &b), 0.5, epsilon = 1e-12);
        let disjoint = BowVector {
            weights: [(9u32, 1.0)].into_iter().collect(),
        };
        assert_eq!(bow_similarity(&a, &disjoint), 0.0);
    }
}
