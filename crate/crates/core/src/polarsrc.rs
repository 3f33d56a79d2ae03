//! Source polarization: the transform `x -> x G_n` with
//! `G_n = [[1,0],[1,1]]^{⊗ log2 n}` in natural Kronecker order (no
//! bit-reversal), exact and Monte Carlo construction of the conditional
//! entropies `H(X̃_j | X̃^{j-1})`, high-entropy index sets and successive
//! cancellation decoding.
//!
//! Indices are zero-based everywhere in this module.

use std::io::{self, Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infotheory::binary_entropy;
use crate::rng;

/// Largest block length accepted by [`construct_exact`].
pub const MAX_EXACT_N: usize = 16;

/// Smallest sample count accepted by [`construct_monte_carlo`].
pub const MIN_SAMPLES: usize = 100;

/// Prior LLRs are clamped here so that deterministic sources stay finite.
const LLR_LIMIT: f64 = 700.0;

/// Decisions with |LLR| at or below this are ties and resolve to 0.
const LLR_TIE: f64 = 1e-9;

/// Samples per independently seeded Monte Carlo chunk.
const CHUNK: usize = 64;

pub const PROFILE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolarError {
    #[error("block length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error(
        "exact construction enumerates 2^n sequences; n={n} exceeds {MAX_EXACT_N}, use Monte Carlo"
    )]
    TooLargeForExact { n: usize },
    #[error("Monte Carlo construction needs at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("epsilon {0} outside (0, 1)")]
    InvalidEpsilon(f64),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error(
        "nested-set diagnostic needs H(p_low) <= H(p_high), got p_low={p_low}, p_high={p_high}"
    )]
    NotNested { p_low: f64, p_high: f64 },
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn check_power_of_two(n: usize) -> Result<(), PolarError> {
    if n.is_power_of_two() {
        Ok(())
    } else {
        Err(PolarError::NotPowerOfTwo(n))
    }
}

fn check_probability(p: f64) -> Result<(), PolarError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(PolarError::InvalidProbability(p))
    }
}

/// Bit vector over F_2, index 0 stored in the least significant bit of
/// the first word. Bits past `len` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct BitSequence {
    len: usize,
    words: Vec<u64>,
}

impl BitSequence {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        let mut s = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b & 1 == 1 {
                s.words[i / 64] |= 1 << (i % 64);
            }
        }
        s
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let bits: Vec<u8> = bits.into_iter().map(u8::from).collect();
        Self::from_bits(&bits)
    }

    /// `len` i.i.d. Bernoulli(p) bits.
    pub fn random<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Self {
        Self::from_bools((0..len).map(|_| rng.gen::<f64>() < p))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(
            i < self.len,
            "bit index {i} out of range for length {}",
            self.len
        );
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        assert!(
            i < self.len,
            "bit index {i} out of range for length {}",
            self.len
        );
        let mask = 1u64 << (i % 64);
        if bit {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.iter().map(u8::from).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn xor(&self, other: &BitSequence) -> Result<BitSequence, PolarError> {
        if self.len != other.len {
            return Err(PolarError::LengthMismatch {
                expected: self.len,
                got: other.len,
            });
        }
        Ok(BitSequence {
            len: self.len,
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a ^ b)
                .collect(),
        })
    }

    /// The bits at the positions of `set`, in increasing index order.
    pub fn select(&self, set: &IndexSet) -> Result<BitSequence, PolarError> {
        if set.n != self.len {
            return Err(PolarError::LengthMismatch {
                expected: set.n,
                got: self.len,
            });
        }
        Ok(BitSequence::from_bools(
            set.indices.iter().map(|&i| self.get(i)),
        ))
    }

    /// Packed bytes, index 0 in the least significant bit of byte 0.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let mut bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        bytes.truncate(self.len.div_ceil(8));
        bytes
    }

    pub fn from_packed_bytes(len: usize, bytes: &[u8]) -> Result<Self, PolarError> {
        if bytes.len() != len.div_ceil(8) {
            return Err(PolarError::LengthMismatch {
                expected: len.div_ceil(8),
                got: bytes.len(),
            });
        }
        if !len.is_multiple_of(8) {
            let last = bytes[bytes.len() - 1];
            if last >> (len % 8) != 0 {
                return Err(PolarError::Format("nonzero padding bits".into()));
            }
        }
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        Ok(Self { len, words })
    }

    /// Sequence file: 8-byte little-endian bit length, then packed bytes.
    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<(), PolarError> {
        w.write_all(&(self.len as u64).to_le_bytes())?;
        w.write_all(&self.to_packed_bytes())?;
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Self, PolarError> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        let len = usize::try_from(u64::from_le_bytes(header))
            .map_err(|_| PolarError::Format("length does not fit in memory".into()))?;
        let mut bytes = vec![0u8; len.div_ceil(8)];
        r.read_exact(&mut bytes)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(PolarError::Format(format!("{} trailing bytes", rest.len())));
        }
        Self::from_packed_bytes(len, &bytes)
    }
}

// MASKS[k] selects the positions whose offset within a 2^(k+1)-bit block is below 2^k.
const MASKS: [u64; 6] = [
    0x5555_5555_5555_5555,
    0x3333_3333_3333_3333,
    0x0F0F_0F0F_0F0F_0F0F,
    0x00FF_00FF_00FF_00FF,
    0x0000_FFFF_0000_FFFF,
    0x0000_0000_FFFF_FFFF,
];

fn butterfly_words(words: &mut [u64], n: usize) {
    let mut half = 1usize;
    while half < n {
        if half < 64 {
            let mask = MASKS[half.trailing_zeros() as usize];
            for w in words.iter_mut() {
                *w ^= (*w >> half) & mask;
            }
        } else {
            let hw = half / 64;
            for block in words.chunks_mut(2 * hw) {
                let (left, right) = block.split_at_mut(hw);
                for (l, r) in left.iter_mut().zip(right.iter()) {
                    *l ^= *r;
                }
            }
        }
        half *= 2;
    }
}

/// `x G_n` over F_2 in O(n log n). `G_n` is an involution, so this is also
/// the inverse transform.
pub fn polar_transform(x: &BitSequence) -> Result<BitSequence, PolarError> {
    check_power_of_two(x.len)?;
    let mut out = x.clone();
    butterfly_words(&mut out.words, x.len);
    Ok(out)
}

/// Transform of an `n`-bit word held in an integer (bit i = index i), n <= 64.
pub(crate) fn transform_u64(mut x: u64, n: usize) -> u64 {
    let mut half = 1usize;
    while half < n {
        x ^= (x >> half) & MASKS[half.trailing_zeros() as usize];
        half *= 2;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ConstructionMethod {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Per-index conditional entropies `h_j = H(X̃_j | X̃^{j-1})` for an
/// i.i.d. Bernoulli(p) source of block length n.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarProfile {
    pub n: usize,
    pub p: f64,
    pub method: ConstructionMethod,
    pub entropies: Vec<f64>,
    /// Standard error per index; zero for exact profiles.
    pub std_errors: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    format_version: u32,
    n: usize,
    p: f64,
    method: String,
    samples: Option<usize>,
    seed: Option<u64>,
    entropies: Vec<f64>,
    std_errors: Vec<f64>,
}

impl PolarProfile {
    pub fn total_entropy(&self) -> f64 {
        self.entropies.iter().sum()
    }

    /// Fraction of indices with entropy strictly inside `(lo, hi)`.
    pub fn unpolarized_fraction(&self, lo: f64, hi: f64) -> f64 {
        let count = self.entropies.iter().filter(|&&h| h > lo && h < hi).count();
        count as f64 / self.n as f64
    }

    pub fn to_json(&self) -> String {
        let (method, samples, seed) = match self.method {
            ConstructionMethod::Exact => ("exact", None, None),
            ConstructionMethod::MonteCarlo { samples, seed } => {
                ("monte_carlo", Some(samples), Some(seed))
            }
        };
        let file = ProfileFile {
            format_version: PROFILE_FORMAT_VERSION,
            n: self.n,
            p: self.p,
            method: method.to_string(),
            samples,
            seed,
            entropies: self.entropies.clone(),
            std_errors: self.std_errors.clone(),
        };
        serde_json::to_string_pretty(&file).expect("profile serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolarError> {
        let file: ProfileFile = serde_json::from_str(text)?;
        check_power_of_two(file.n)?;
        check_probability(file.p)?;
        if file.entropies.len() != file.n {
            return Err(PolarError::LengthMismatch {
                expected: file.n,
                got: file.entropies.len(),
            });
        }
        let method = match (file.method.as_str(), file.samples, file.seed) {
            ("exact", _, _) => ConstructionMethod::Exact,
            ("monte_carlo", Some(samples), Some(seed)) => {
                ConstructionMethod::MonteCarlo { samples, seed }
            }
            (other, _, _) => return Err(PolarError::Format(format!("unknown method `{other}`"))),
        };
        let std_errors = if file.std_errors.is_empty() {
            vec![0.0; file.n]
        } else {
            file.std_errors
        };
        Ok(Self {
            n: file.n,
            p: file.p,
            method,
            entropies: file.entropies,
            std_errors,
        })
    }
}

/// Exact profile by enumerating all `2^n` source sequences.
///
/// Accumulates the law of X̃^n, then peels off one index at a time:
/// `h_j = H(X̃^j) - H(X̃^{j-1})`.
pub fn construct_exact(p: f64, n: usize) -> Result<PolarProfile, PolarError> {
    check_power_of_two(n)?;
    check_probability(p)?;
    if n > MAX_EXACT_N {
        return Err(PolarError::TooLargeForExact { n });
    }
    let weights: Vec<f64> = (0..=n)
        .map(|w| p.powi(w as i32) * (1.0 - p).powi((n - w) as i32))
        .collect();
    let mut law = vec![0.0f64; 1 << n];
    for x in 0..(1u64 << n) {
        law[transform_u64(x, n) as usize] += weights[x.count_ones() as usize];
    }
    let mut prefix_entropy = vec![0.0f64; n + 1];
    for j in (1..=n).rev() {
        prefix_entropy[j] = crate::infotheory::entropy_of_masses(law.iter().copied());
        let half = 1usize << (j - 1);
        // drop index j-1 (bit j-1) by folding the upper half onto the lower
        let (lo, hi) = law.split_at_mut(half);
        for (a, b) in lo.iter_mut().zip(hi.iter()) {
            *a += *b;
        }
        law.truncate(half);
    }
    let entropies = (1..=n)
        .map(|j| prefix_entropy[j] - prefix_entropy[j - 1])
        .collect();
    Ok(PolarProfile {
        n,
        p,
        method: ConstructionMethod::Exact,
        entropies,
        std_errors: vec![0.0; n],
    })
}

/// Exact `L1 ⊞ L2 = 2 atanh(tanh(L1/2) tanh(L2/2))`, evaluated stably.
fn boxplus(a: f64, b: f64) -> f64 {
    let sign = if (a < 0.0) != (b < 0.0) { -1.0 } else { 1.0 };
    sign * a.abs().min(b.abs()) + (-(a + b).abs()).exp().ln_1p() - (-(a - b).abs()).exp().ln_1p()
}

/// Entropy in bits of a bit whose log-likelihood ratio ln(P0/P1) is `llr`.
fn llr_entropy(llr: f64) -> f64 {
    let a = llr.abs();
    let minority = 1.0 / (1.0 + a.exp());
    (minority * a + (-a).exp().ln_1p()) / std::f64::consts::LN_2
}

fn prior_llr(p: f64) -> f64 {
    ((1.0 - p) / p).ln().clamp(-LLR_LIMIT, LLR_LIMIT)
}

/// Scratch buffers for successive cancellation; the node of size `s` keeps
/// its LLRs and re-encoded bits at `[s, 2s)`.
struct ScWorkspace {
    llr: Vec<f64>,
    bits: Vec<u8>,
}

impl ScWorkspace {
    fn new(n: usize, p: f64) -> Self {
        let mut llr = vec![0.0; 2 * n];
        llr[n..].fill(prior_llr(p));
        Self {
            llr,
            bits: vec![0; 2 * n],
        }
    }

    fn reset(&mut self, n: usize, p: f64) {
        self.llr[n..].fill(prior_llr(p));
    }

    /// Walks indices 0..s in order. `leaf(j, llr)` receives the LLR of
    /// X̃_j given the bits already fixed and returns the bit to fix.
    fn descend<L: FnMut(usize, f64) -> u8>(&mut self, s: usize, offset: usize, leaf: &mut L) {
        if s == 1 {
            self.bits[1] = leaf(offset, self.llr[1]);
            return;
        }
        let h = s / 2;
        for i in 0..h {
            self.llr[h + i] = boxplus(self.llr[s + i], self.llr[s + h + i]);
        }
        self.descend(h, offset, leaf);
        for i in 0..h {
            let a = self.bits[h + i];
            self.bits[s + i] = a;
            let left = self.llr[s + i];
            self.llr[h + i] = self.llr[s + h + i] + if a == 0 { left } else { -left };
        }
        self.descend(h, offset + h, leaf);
        for i in 0..h {
            let b = self.bits[h + i];
            self.bits[s + i] ^= b;
            self.bits[s + h + i] = b;
        }
    }
}

/// Runs one genie-aided pass and adds each index's posterior entropy to `sums`.
fn genie_pass(
    x_tilde: &BitSequence,
    p: f64,
    ws: &mut ScWorkspace,
    sums: &mut [f64],
    squares: &mut [f64],
) {
    let n = x_tilde.len();
    ws.reset(n, p);
    ws.descend(n, 0, &mut |j, llr| {
        let h = llr_entropy(llr);
        sums[j] += h;
        squares[j] += h * h;
        u8::from(x_tilde.get(j))
    });
}

/// Monte Carlo profile: for each sampled sequence, successive cancellation
/// with the true past bits gives the exact posterior of every X̃_j, and the
/// posterior entropies are averaged over samples.
pub fn construct_monte_carlo(
    p: f64,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<PolarProfile, PolarError> {
    check_power_of_two(n)?;
    check_probability(p)?;
    if samples < MIN_SAMPLES {
        return Err(PolarError::TooFewSamples(samples));
    }
    let chunks = samples.div_ceil(CHUNK);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, c as u64);
            let count = CHUNK.min(samples - c * CHUNK);
            let mut ws = ScWorkspace::new(n, p);
            let mut sums = vec![0.0; n];
            let mut squares = vec![0.0; n];
            for _ in 0..count {
                let x = BitSequence::random(n, p, &mut rng);
                let x_tilde = polar_transform(&x).expect("power of two");
                genie_pass(&x_tilde, p, &mut ws, &mut sums, &mut squares);
            }
            (sums, squares)
        })
        .collect();
    let mut sums = vec![0.0; n];
    let mut squares = vec![0.0; n];
    for (s, q) in partials {
        for j in 0..n {
            sums[j] += s[j];
            squares[j] += q[j];
        }
    }
    let k = samples as f64;
    let entropies: Vec<f64> = sums.iter().map(|s| s / k).collect();
    let std_errors = squares
        .iter()
        .zip(&entropies)
        .map(|(q, mean)| {
            let var = (q / k - mean * mean).max(0.0) * k / (k - 1.0);
            (var / k).sqrt()
        })
        .collect();
    Ok(PolarProfile {
        n,
        p,
        method: ConstructionMethod::MonteCarlo { samples, seed },
        entropies,
        std_errors,
    })
}

/// Exact profile when `n <= MAX_EXACT_N`, Monte Carlo otherwise.
pub fn construct(p: f64, n: usize, samples: usize, seed: u64) -> Result<PolarProfile, PolarError> {
    if n <= MAX_EXACT_N {
        construct_exact(p, n)
    } else {
        construct_monte_carlo(p, n, samples, seed)
    }
}

/// Sorted zero-based positions within a block of length n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSet {
    pub n: usize,
    pub indices: Vec<usize>,
    pub epsilon: f64,
}

impl IndexSet {
    pub fn new(n: usize, mut indices: Vec<usize>, epsilon: f64) -> Result<Self, PolarError> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(PolarError::Format(format!(
                "index {bad} outside block of length {n}"
            )));
        }
        Ok(Self {
            n,
            indices,
            epsilon,
        })
    }

    pub fn all(n: usize) -> Self {
        Self {
            n,
            indices: (0..n).collect(),
            epsilon: 0.0,
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            indices: Vec::new(),
            epsilon: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn rate(&self) -> f64 {
        self.len() as f64 / self.n as f64
    }

    /// Number of indices of `self` missing from `other`.
    pub fn count_not_in(&self, other: &IndexSet) -> usize {
        self.indices.iter().filter(|&&i| !other.contains(i)).count()
    }
}

/// `{ j : h_j >= epsilon }`.
pub fn high_entropy_set(profile: &PolarProfile, epsilon: f64) -> Result<IndexSet, PolarError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(PolarError::InvalidEpsilon(epsilon));
    }
    let indices = profile
        .entropies
        .iter()
        .enumerate()
        .filter(|(_, &h)| h >= epsilon)
        .map(|(j, _)| j)
        .collect();
    Ok(IndexSet {
        n: profile.n,
        indices,
        epsilon,
    })
}

/// Successive cancellation: indices in `set` take the `known` bits (in
/// index order); every other index takes its most likely value given the
/// bits decided before it, 0 on ties (|LLR| <= 1e-9). Returns the estimate of X̃^n; apply
/// [`polar_transform`] to get X^n.
pub fn sc_decode(known: &BitSequence, set: &IndexSet, p: f64) -> Result<BitSequence, PolarError> {
    check_power_of_two(set.n)?;
    check_probability(p)?;
    if known.len() != set.len() {
        return Err(PolarError::LengthMismatch {
            expected: set.len(),
            got: known.len(),
        });
    }
    let n = set.n;
    let mut fixed: Vec<Option<u8>> = vec![None; n];
    for (k, &i) in set.indices.iter().enumerate() {
        fixed[i] = Some(u8::from(known.get(k)));
    }
    let mut out = BitSequence::zeros(n);
    let mut ws = ScWorkspace::new(n, p);
    ws.descend(n, 0, &mut |j, llr| {
        let bit = fixed[j].unwrap_or(u8::from(llr < -LLR_TIE));
        if bit == 1 {
            out.set(j, true);
        }
        bit
    });
    Ok(out)
}

/// Decodes X̃^n with [`sc_decode`] and inverts the transform.
pub fn reconstruct(known: &BitSequence, set: &IndexSet, p: f64) -> Result<BitSequence, PolarError> {
    polar_transform(&sc_decode(known, set, p)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeBench {
    pub n: usize,
    pub p: f64,
    pub r_size: usize,
    pub trials: usize,
    pub block_errors: usize,
}

impl DecodeBench {
    pub fn block_error_rate(&self) -> f64 {
        self.block_errors as f64 / self.trials as f64
    }
}

/// Empirical block error of [`reconstruct`] on fresh Bernoulli(p) sequences.
pub fn decode_bench(
    p: f64,
    set: &IndexSet,
    trials: usize,
    seed: u64,
) -> Result<DecodeBench, PolarError> {
    check_power_of_two(set.n)?;
    let errors: Result<Vec<bool>, PolarError> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, t as u64);
            let x = BitSequence::random(set.n, p, &mut rng);
            let known = polar_transform(&x)?.select(set)?;
            Ok(reconstruct(&known, set, p)? != x)
        })
        .collect();
    Ok(DecodeBench {
        n: set.n,
        p,
        r_size: set.len(),
        trials,
        block_errors: errors?.into_iter().filter(|&e| e).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedSetReport {
    pub n: usize,
    pub epsilon: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub r_low: usize,
    pub r_high: usize,
    /// |R(p_low) \ R(p_high)|.
    pub violations: usize,
    pub violation_fraction: f64,
}

/// Measures how far `R_ε(p_low) ⊆ R_ε(p_high)` fails at finite n. Both
/// profiles share the seed.
pub fn nested_set_diagnostic(
    p_low: f64,
    p_high: f64,
    n: usize,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<NestedSetReport, PolarError> {
    check_probability(p_low)?;
    check_probability(p_high)?;
    if binary_entropy(p_low) > binary_entropy(p_high) {
        return Err(PolarError::NotNested { p_low, p_high });
    }
    let low = high_entropy_set(&construct(p_low, n, samples, seed)?, epsilon)?;
    let high = high_entropy_set(&construct(p_high, n, samples, seed)?, epsilon)?;
    let violations = low.count_not_in(&high);
    Ok(NestedSetReport {
        n,
        epsilon,
        p_low,
        p_high,
        r_low: low.len(),
        r_high: high.len(),
        violations,
        violation_fraction: violations as f64 / n as f64,
    })
}

/// `max(2^{-n^0.49}, 1 / (4 samples))`: the vanishing threshold, floored at
/// what a `samples`-sample Monte Carlo profile can resolve.
pub fn scheduled_epsilon(n: usize, samples: usize) -> f64 {
    let vanishing = 2f64.powf(-(n as f64).powf(0.49));
    vanishing.max(1.0 / (4.0 * samples as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// x G_n by explicit Kronecker matrix.
    fn matrix_transform(x: &[u8]) -> Vec<u8> {
        let n = x.len();
        let mut g = vec![vec![1u8]];
        while g.len() < n {
            let k = g.len();
            let mut next = vec![vec![0u8; 2 * k]; 2 * k];
            for r in 0..k {
                for c in 0..k {
                    next[r][c] = g[r][c];
                    next[k + r][c] = g[r][c];
                    next[k + r][k + c] = g[r][c];
                }
            }
            g = next;
        }
        (0..n)
            .map(|c| (0..n).fold(0u8, |acc, r| acc ^ (x[r] & g[r][c])))
            .collect()
    }

    #[test]
    fn transform_golden_vectors() {
        let t = |bits: &[u8]| {
            polar_transform(&BitSequence::from_bits(bits))
                .unwrap()
                .to_bits()
        };
        assert_eq!(t(&[1, 0]), vec![1, 0]);
        assert_eq!(t(&[1, 1]), vec![0, 1]);
        assert_eq!(t(&[0, 1]), vec![1, 1]);
        assert_eq!(t(&[1]), vec![1]);
        assert!(matches!(
            polar_transform(&BitSequence::zeros(3)),
            Err(PolarError::NotPowerOfTwo(3))
        ));
        assert!(matches!(
            polar_transform(&BitSequence::zeros(0)),
            Err(PolarError::NotPowerOfTwo(0))
        ));
    }

    #[test]
    fn transform_matches_matrix_exhaustively() {
        for n in [1usize, 2, 4, 8] {
            for v in 0..(1u32 << n) {
                let bits: Vec<u8> = (0..n).map(|i| ((v >> i) & 1) as u8).collect();
                let fast = polar_transform(&BitSequence::from_bits(&bits))
                    .unwrap()
                    .to_bits();
                assert_eq!(fast, matrix_transform(&bits));
                assert_eq!(
                    transform_u64(v as u64, n),
                    fast.iter()
                        .enumerate()
                        .map(|(i, &b)| (b as u64) << i)
                        .sum::<u64>()
                );
            }
        }
    }

    #[test]
    fn packed_format() {
        let s = BitSequence::from_bits(&[1, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(s.to_packed_bytes(), vec![0x01, 0x02]);
        let mut file = Vec::new();
        s.write_raw(&mut file).unwrap();
        assert_eq!(file, vec![10, 0, 0, 0, 0, 0, 0, 0, 0x01, 0x02]);
        assert_eq!(BitSequence::read_raw(&file[..]).unwrap(), s);
        assert!(BitSequence::from_packed_bytes(10, &[0x01, 0x06]).is_err());
        assert!(BitSequence::read_raw(&[10, 0, 0, 0, 0, 0, 0, 0, 1][..]).is_err());
    }

    fn h(p: f64) -> f64 {
        binary_entropy(p)
    }

    #[test]
    fn exact_profile_n2() {
        // brute force over the four sequences: x̃_1 = x_1 ^ x_2
        let p = 0.11;
        let q = 2.0 * p * (1.0 - p);
        let prof = construct_exact(p, 2).unwrap();
        assert_abs_diff_eq!(prof.entropies[0], h(q), epsilon = 1e-12);
        assert_abs_diff_eq!(prof.entropies[1], 2.0 * h(p) - h(q), epsilon = 1e-12);
        assert_abs_diff_eq!(prof.entropies[0], 0.7135, epsilon = 1e-3);
        assert_abs_diff_eq!(prof.entropies[1], 0.2863, epsilon = 1e-3);

        let uniform = construct_exact(0.5, 2).unwrap();
        assert_abs_diff_eq!(uniform.entropies[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(uniform.entropies[1], 1.0, epsilon = 1e-12);
        for n in [1, 2, 4, 8, 16] {
            assert!(construct_exact(0.0, n)
                .unwrap()
                .entropies
                .iter()
                .all(|&h| h == 0.0));
        }
        assert!(matches!(
            construct_exact(0.1, 32),
            Err(PolarError::TooLargeForExact { n: 32 })
        ));
        assert!(matches!(
            construct_exact(0.1, 6),
            Err(PolarError::NotPowerOfTwo(6))
        ));
    }

    #[test]
    fn exact_profile_chain_rule() {
        for n in [1usize, 2, 4, 8, 16] {
            for p in [0.05, 0.11, 0.3, 0.5] {
                let prof = construct_exact(p, n).unwrap();
                assert_abs_diff_eq!(prof.total_entropy(), n as f64 * h(p), epsilon = 1e-9);
                assert!(prof
                    .entropies
                    .iter()
                    .all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
            }
        }
    }

    #[test]
    fn genie_pass_is_exact_in_expectation() {
        // averaging the genie-aided posterior entropy over all 2^n sequences
        // with their exact weights must reproduce the enumeration profile
        for p in [0.05, 0.3] {
            let n = 8;
            let exact = construct_exact(p, n).unwrap();
            let mut ws = ScWorkspace::new(n, p);
            let mut acc = vec![0.0; n];
            for v in 0..(1u32 << n) {
                let bits: Vec<u8> = (0..n).map(|i| ((v >> i) & 1) as u8).collect();
                let w = p.powi(v.count_ones() as i32)
                    * (1.0 - p).powi(n as i32 - v.count_ones() as i32);
                let xt = polar_transform(&BitSequence::from_bits(&bits)).unwrap();
                let mut sums = vec![0.0; n];
                let mut sq = vec![0.0; n];
                genie_pass(&xt, p, &mut ws, &mut sums, &mut sq);
                for (a, s) in acc.iter_mut().zip(&sums) {
                    *a += w * s;
                }
            }
            for (a, e) in acc.iter().zip(&exact.entropies) {
                assert_abs_diff_eq!(*a, *e, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn monte_carlo_basics() {
        assert!(matches!(
            construct_monte_carlo(0.1, 64, 99, 1),
            Err(PolarError::TooFewSamples(99))
        ));
        let prof = construct_monte_carlo(0.11, 256, 2000, 7).unwrap();
        assert!((prof.total_entropy() / 256.0 - h(0.11)).abs() < 0.02);
        let again = construct_monte_carlo(0.11, 256, 2000, 7).unwrap();
        assert_eq!(prof, again);

        let uniform = construct_monte_carlo(0.5, 64, 200, 3).unwrap();
        for (m, se) in uniform.entropies.iter().zip(&uniform.std_errors) {
            assert!((m - 1.0).abs() <= 3.0 * se + 1e-12);
        }
    }

    #[test]
    fn high_entropy_set_examples() {
        let prof = construct_exact(0.11, 2).unwrap();
        assert_eq!(high_entropy_set(&prof, 0.5).unwrap().indices, vec![0]);
        let prof16 = construct_exact(0.2, 16).unwrap();
        assert_eq!(high_entropy_set(&prof16, 1e-12).unwrap().len(), 16);
        let zero = construct_exact(0.0, 8).unwrap();
        assert!(high_entropy_set(&zero, 0.3).unwrap().is_empty());
        assert!(high_entropy_set(&prof, 0.0).is_err());
        // ties are included
        let tie = PolarProfile {
            entropies: vec![0.5, 0.25],
            ..prof
        };
        assert_eq!(high_entropy_set(&tie, 0.5).unwrap().indices, vec![0]);
    }

    #[test]
    fn sc_decode_corners() {
        let mut rng = rng::stream(5, 0);
        let x = BitSequence::random(64, 0.3, &mut rng);
        let all = IndexSet::all(64);
        let xt = polar_transform(&x).unwrap();
        assert_eq!(sc_decode(&xt.select(&all).unwrap(), &all, 0.3).unwrap(), xt);
        assert_eq!(reconstruct(&xt, &all, 0.3).unwrap(), x);

        let none = IndexSet::empty(32);
        assert_eq!(
            sc_decode(&BitSequence::zeros(0), &none, 0.0).unwrap(),
            BitSequence::zeros(32)
        );
        assert!(matches!(
            sc_decode(&BitSequence::zeros(3), &IndexSet::all(4), 0.1),
            Err(PolarError::LengthMismatch { .. })
        ));
    }

    /// Sequential MAP by enumeration: P(X̃_j = b | decided prefix) over all 2^n sequences.
    fn brute_force_sequential_map(known: &[Option<u8>], p: f64) -> Vec<u8> {
        let n = known.len();
        let law: Vec<f64> = {
            let mut law = vec![0.0; 1 << n];
            for x in 0..(1u64 << n) {
                let w = x.count_ones() as i32;
                law[transform_u64(x, n) as usize] += p.powi(w) * (1.0 - p).powi(n as i32 - w);
            }
            law
        };
        let mut decided = 0u64;
        let mut out = Vec::with_capacity(n);
        for (j, k) in known.iter().enumerate() {
            let bit = match k {
                Some(b) => *b,
                None => {
                    let prefix_mask = (1u64 << j) - 1;
                    let (mut p0, mut p1) = (0.0, 0.0);
                    for (v, &m) in law.iter().enumerate() {
                        if (v as u64) & prefix_mask == decided {
                            if (v >> j) & 1 == 1 {
                                p1 += m;
                            } else {
                                p0 += m;
                            }
                        }
                    }
                    u8::from(p1 > p0 * (1.0 + 1e-9))
                }
            };
            decided |= (bit as u64) << j;
            out.push(bit);
        }
        out
    }

    #[test]
    fn sc_equals_sequential_map_at_n8() {
        let n = 8;
        for (p, eps) in [(0.05, 0.01), (0.05, 0.2), (0.2, 0.5), (0.11, 0.05)] {
            let set = high_entropy_set(&construct_exact(p, n).unwrap(), eps).unwrap();
            let mut agree = 0;
            for v in 0..(1u32 << n) {
                let bits: Vec<u8> = (0..n).map(|i| ((v >> i) & 1) as u8).collect();
                let xt = polar_transform(&BitSequence::from_bits(&bits)).unwrap();
                let known = xt.select(&set).unwrap();
                let sc = sc_decode(&known, &set, p).unwrap().to_bits();
                let fixed: Vec<Option<u8>> = (0..n)
                    .map(|j| set.contains(j).then(|| u8::from(xt.get(j))))
                    .collect();
                if sc == brute_force_sequential_map(&fixed, p) {
                    agree += 1;
                }
            }
            assert_eq!(agree, 1 << n, "p={p} eps={eps}");
        }
    }

    #[test]
    fn decoding_n16_block_error() {
        let set = high_entropy_set(&construct_exact(0.05, 16).unwrap(), 1e-3).unwrap();
        let bench = decode_bench(0.05, &set, 10_000, 99).unwrap();
        assert!(bench.block_error_rate() <= 0.02, "{bench:?}");
    }

    #[test]
    fn nested_corners() {
        let same = nested_set_diagnostic(0.1, 0.1, 64, 0.5, 200, 1).unwrap();
        assert_eq!(same.violations, 0);
        let zero = nested_set_diagnostic(0.0, 0.2, 64, 0.5, 200, 1).unwrap();
        assert_eq!(zero.violation_fraction, 0.0);
        assert!(nested_set_diagnostic(0.3, 0.1, 64, 0.5, 200, 1).is_err());
    }

    #[test]
    fn profile_json_round_trip() {
        let prof = construct_monte_carlo(0.2, 32, 128, 4).unwrap();
        let back = PolarProfile::from_json(&prof.to_json()).unwrap();
        assert_eq!(back, prof);
        let text = prof.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["n", "p", "method", "samples", "entropies", "format_version"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn epsilon_schedule() {
        assert_abs_diff_eq!(scheduled_epsilon(1, 1_000_000), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(scheduled_epsilon(4096, 2000), 1.0 / 8000.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn involution_and_linearity(k in 0usize..=12, seed in any::<u64>()) {
            let n = 1usize << k;
            let mut rng = rng::stream(seed, 0);
            let x = BitSequence::random(n, 0.5, &mut rng);
            let y = BitSequence::random(n, 0.5, &mut rng);
            let tx = polar_transform(&x).unwrap();
            prop_assert_eq!(polar_transform(&tx).unwrap(), x.clone());
            let lhs = polar_transform(&x.xor(&y).unwrap()).unwrap();
            let rhs = tx.xor(&polar_transform(&y).unwrap()).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn packing_round_trip(bits in prop::collection::vec(0u8..2, 0..300)) {
            let s = BitSequence::from_bits(&bits);
            let mut buf = Vec::new();
            s.write_raw(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), 8 + bits.len().div_ceil(8));
            prop_assert_eq!(BitSequence::read_raw(&buf[..]).unwrap(), s);
        }
    }
}
