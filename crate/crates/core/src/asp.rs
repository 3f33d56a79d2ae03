//! Three-party XOR over discrete memoryless sources: the asymptotically
//! secure polar (ASP) protocol, its Fano security bound and an exact MAP
//! adversary for small block lengths.
//!
//! Roles follow the designated pair of a [`SourceModel`]: the two parties
//! holding the pair send their transformed sequences restricted to the
//! high-entropy set of the XOR marginal, the third party decodes the sum,
//! adds its own sequence and sends the result back.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infotheory::{
    pair_diagnostics, stable_sum, InfoError, JointDistribution, PairDiagnostics, ENTROPY_TOLERANCE,
};
use crate::polarsrc::{
    high_entropy_set, polar_transform, reconstruct, sc_decode, transform_u64, BitSequence,
    IndexSet, PolarError, PolarProfile,
};
use crate::rng;

/// Largest n for [`map_attack`] on a single view.
pub const MAP_ATTACK_MAX_N: usize = 12;

/// Largest n for [`exact_map_errors`] when the decoder's own sequence is
/// independent of the pair.
pub const EXACT_ERROR_MAX_N: usize = 10;

/// Largest n for [`exact_map_errors`] when the decoder's own sequence is
/// correlated with the pair, so that it must be enumerated too.
pub const EXACT_ERROR_MAX_N_CORRELATED: usize = 8;

/// Profiles are matched to the XOR marginal up to this absolute tolerance on p.
const PROFILE_P_TOLERANCE: f64 = 1e-9;

/// Relative tolerance under which two posterior weights are tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AspError {
    #[error("source model must have exactly three binary variables, got alphabet sizes {0:?}")]
    NotThreeBits(Vec<usize>),
    #[error("no pair is additively correlated (largest gap {gap:.3e} on ({a}, {b}))")]
    NotAdditivelyCorrelated { a: String, b: String, gap: f64 },
    #[error("profile is for n={profile_n}, p={profile_p}; the run needs n={n}, p={p}")]
    ProfileMismatch {
        profile_n: usize,
        profile_p: f64,
        n: usize,
        p: f64,
    },
    #[error("exhaustive attack limited to n <= {limit}, got n={n}")]
    TooLargeForExact { n: usize, limit: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Polar(#[from] PolarError),
    #[error(transparent)]
    Info(#[from] InfoError),
}

/// A distribution over three bits together with the protocol roles it
/// induces.
#[derive(Debug, Clone)]
pub struct SourceModel {
    dist: JointDistribution,
    pair: (usize, usize),
    decoder: usize,
    diagnostics: PairDiagnostics,
    /// Masses in role order, index `4a + 2b + c` with `(a, b)` the pair and
    /// `c` the decoder's bit.
    role_masses: [f64; 8],
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

impl SourceModel {
    /// Designates the pair with the largest additive-correlation gap
    /// (the first such pair in variable order on ties).
    pub fn new(dist: JointDistribution) -> Result<Self, AspError> {
        let sizes = dist.alphabet_sizes();
        if sizes != [2, 2, 2] {
            return Err(AspError::NotThreeBits(sizes));
        }
        let labels: Vec<String> = dist.variables().iter().map(|v| v.name.clone()).collect();
        let mut best: Option<((usize, usize), PairDiagnostics)> = None;
        for &(i, j) in &PAIRS {
            let d = pair_diagnostics(&dist, &labels[i], &labels[j])?;
            if best.as_ref().is_none_or(|(_, b)| d.gap > b.gap) {
                best = Some(((i, j), d));
            }
        }
        let (pair, diagnostics) = best.expect("three pairs");
        let decoder = 3 - pair.0 - pair.1;
        let mut role_masses = [0.0; 8];
        for (cell, mass) in dist.cells() {
            role_masses[4 * cell[pair.0] + 2 * cell[pair.1] + cell[decoder]] += mass;
        }
        Ok(Self {
            dist,
            pair,
            decoder,
            diagnostics,
            role_masses,
        })
    }

    /// X ~ Ber(1/2), Y = X xor Ber(p), Z ~ Ber(1/2) independent.
    pub fn bsc(p: f64) -> Result<Self, AspError> {
        Self::new(JointDistribution::bsc_triple(p)?)
    }

    pub fn distribution(&self) -> &JointDistribution {
        &self.dist
    }

    pub fn labels(&self) -> Vec<&str> {
        self.dist
            .variables()
            .iter()
            .map(|v| v.name.as_str())
            .collect()
    }

    /// Positions of the two senders.
    pub fn pair(&self) -> (usize, usize) {
        self.pair
    }

    /// Position of the party that decodes and sends back.
    pub fn decoder(&self) -> usize {
        self.decoder
    }

    pub fn diagnostics(&self) -> &PairDiagnostics {
        &self.diagnostics
    }

    pub fn gap(&self) -> f64 {
        self.diagnostics.gap
    }

    pub fn is_additively_correlated(&self) -> bool {
        self.diagnostics.gap > ENTROPY_TOLERANCE
    }

    /// P(a xor b = 1) for the designated pair.
    pub fn xor_probability(&self) -> f64 {
        stable_sum(
            (0..8)
                .filter(|c| ((c >> 2) ^ (c >> 1)) & 1 == 1)
                .map(|c| self.role_masses[c]),
        )
    }

    /// The sum of the pair is a constant.
    pub fn is_degenerate(&self) -> bool {
        let q = self.xor_probability();
        q <= PROFILE_P_TOLERANCE || q >= 1.0 - PROFILE_P_TOLERANCE
    }

    fn first_probability(&self) -> f64 {
        stable_sum((4..8).map(|c| self.role_masses[c]))
    }

    fn pair_masses(&self) -> [f64; 4] {
        let m = &self.role_masses;
        [m[0] + m[1], m[2] + m[3], m[4] + m[5], m[6] + m[7]]
    }

    /// The decoder's bit is independent of the pair.
    fn decoder_independent(&self) -> bool {
        let pair = self.pair_masses();
        let c1: f64 = (0..4).map(|ab| self.role_masses[2 * ab + 1]).sum();
        (0..4).all(|ab| {
            (self.role_masses[2 * ab] - pair[ab] * (1.0 - c1)).abs() <= 1e-15
                && (self.role_masses[2 * ab + 1] - pair[ab] * c1).abs() <= 1e-15
        })
    }
}

/// One block of source output, sequences in variable order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSample {
    pub sequences: [BitSequence; 3],
}

#[allow(clippy::needless_range_loop)]
fn sample_with<R: Rng>(model: &SourceModel, n: usize, rng: &mut R) -> SourceSample {
    let mut cumulative = [0.0; 8];
    let mut acc = 0.0;
    for (c, m) in model.role_masses.iter().enumerate() {
        acc += m;
        cumulative[c] = acc;
    }
    let mut bits = [vec![0u8; n], vec![0u8; n], vec![0u8; n]];
    let roles = [model.pair.0, model.pair.1, model.decoder];
    for i in 0..n {
        let u: f64 = rng.gen();
        let cell = cumulative.iter().position(|&c| u < c).unwrap_or_else(|| {
            (0..8)
                .rev()
                .find(|&c| model.role_masses[c] > 0.0)
                .unwrap_or(0)
        });
        for (k, &pos) in roles.iter().enumerate() {
            bits[pos][i] = ((cell >> (2 - k)) & 1) as u8;
        }
    }
    SourceSample {
        sequences: bits.map(|b| BitSequence::from_bits(&b)),
    }
}

/// `n` i.i.d. draws from the model, reproducible from `seed`.
pub fn sample_source(model: &SourceModel, n: usize, seed: u64) -> SourceSample {
    sample_with(model, n, &mut rng::stream(seed, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkTraffic {
    pub from: usize,
    pub to: usize,
    pub bits: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedBlock {
    pub from: usize,
    pub bits: BitSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspRunResult {
    pub n: usize,
    pub epsilon: f64,
    pub r_size: usize,
    pub source: SourceSample,
    /// The decoder's estimate of the pair's sum.
    pub decoded_sum: BitSequence,
    /// Final output per party, in variable order.
    pub outputs: [BitSequence; 3],
    pub truth: BitSequence,
    pub block_correct: bool,
    pub links: Vec<LinkTraffic>,
    /// Everything each party received, in variable order.
    pub received: [Vec<ReceivedBlock>; 3],
}

fn check_profile(model: &SourceModel, n: usize, profile: &PolarProfile) -> Result<(), AspError> {
    let p = model.xor_probability();
    if profile.n != n || (profile.p - p).abs() > PROFILE_P_TOLERANCE {
        return Err(AspError::ProfileMismatch {
            profile_n: profile.n,
            profile_p: profile.p,
            n,
            p,
        });
    }
    Ok(())
}

/// The index set the senders transmit on, built from a profile of the
/// designated pair's XOR marginal.
pub fn transmitted_set(
    model: &SourceModel,
    n: usize,
    epsilon: f64,
    profile: &PolarProfile,
) -> Result<IndexSet, AspError> {
    check_profile(model, n, profile)?;
    Ok(high_entropy_set(profile, epsilon)?)
}

/// A model, block length and transmitted set fixed for repeated runs.
#[derive(Debug, Clone)]
pub struct AspSession<'a> {
    model: &'a SourceModel,
    set: IndexSet,
}

impl<'a> AspSession<'a> {
    pub fn new(
        model: &'a SourceModel,
        n: usize,
        epsilon: f64,
        profile: &PolarProfile,
    ) -> Result<Self, AspError> {
        if !model.is_additively_correlated() {
            let labels = model.labels();
            return Err(AspError::NotAdditivelyCorrelated {
                a: labels[model.pair.0].to_string(),
                b: labels[model.pair.1].to_string(),
                gap: model.gap(),
            });
        }
        let set = transmitted_set(model, n, epsilon, profile)?;
        Ok(Self { model, set })
    }

    pub fn with_set(model: &'a SourceModel, set: IndexSet) -> Self {
        Self { model, set }
    }

    pub fn set(&self) -> &IndexSet {
        &self.set
    }

    pub fn n(&self) -> usize {
        self.set.n
    }

    pub fn run(&self, seed: u64) -> Result<AspRunResult, AspError> {
        self.trial(seed, 0)
    }

    fn trial(&self, seed: u64, index: u64) -> Result<AspRunResult, AspError> {
        let sample = sample_with(self.model, self.set.n, &mut rng::stream(seed, index));
        self.run_on(sample)
    }

    /// The decoder's estimate of the pair's sum from the two received blocks.
    pub fn decode_sum(
        &self,
        first: &BitSequence,
        second: &BitSequence,
    ) -> Result<BitSequence, AspError> {
        let combined = first.xor(second)?;
        Ok(reconstruct(
            &combined,
            &self.set,
            self.model.xor_probability(),
        )?)
    }

    pub fn run_on(&self, source: SourceSample) -> Result<AspRunResult, AspError> {
        let (a, b) = self.model.pair;
        let c = self.model.decoder;
        let n = self.set.n;
        let msg_a = polar_transform(&source.sequences[a])?.select(&self.set)?;
        let msg_b = polar_transform(&source.sequences[b])?.select(&self.set)?;
        let decoded_sum = self.decode_sum(&msg_a, &msg_b)?;
        let result = decoded_sum.xor(&source.sequences[c])?;
        let truth = source.sequences[a]
            .xor(&source.sequences[b])?
            .xor(&source.sequences[c])?;

        let mut received: [Vec<ReceivedBlock>; 3] = Default::default();
        received[c] = vec![
            ReceivedBlock {
                from: a,
                bits: msg_a,
            },
            ReceivedBlock {
                from: b,
                bits: msg_b,
            },
        ];
        received[c].sort_by_key(|r| r.from);
        received[a].push(ReceivedBlock {
            from: c,
            bits: result.clone(),
        });
        received[b].push(ReceivedBlock {
            from: c,
            bits: result.clone(),
        });

        let r = self.set.len();
        let mut links = vec![
            LinkTraffic {
                from: a,
                to: c,
                bits: r,
            },
            LinkTraffic {
                from: b,
                to: c,
                bits: r,
            },
            LinkTraffic {
                from: c,
                to: a,
                bits: n,
            },
            LinkTraffic {
                from: c,
                to: b,
                bits: n,
            },
        ];
        links.sort_by_key(|l| (l.from, l.to));

        Ok(AspRunResult {
            n,
            epsilon: self.set.epsilon,
            r_size: r,
            block_correct: result == truth,
            outputs: [result.clone(), result.clone(), result],
            truth,
            decoded_sum,
            source,
            links,
            received,
        })
    }

    /// Block errors over `trials` independent runs; trial `t` uses stream `t` of `seed`.
    pub fn block_errors(&self, trials: usize, seed: u64) -> Result<usize, AspError> {
        let wrong: Result<Vec<bool>, AspError> = (0..trials as u64)
            .into_par_iter()
            .map(|t| self.trial(seed, t).map(|r| !r.block_correct))
            .collect();
        Ok(wrong?.into_iter().filter(|&w| w).count())
    }
}

/// One run of the protocol on a fresh sample.
pub fn run_asp(
    model: &SourceModel,
    n: usize,
    epsilon: f64,
    profile: &PolarProfile,
    seed: u64,
) -> Result<AspRunResult, AspError> {
    AspSession::new(model, n, epsilon, profile)?.run(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanoBound {
    pub n: usize,
    pub r_size: usize,
    pub h_joint: f64,
    pub h_xor: f64,
    /// `max(0, (n H(a,b) - 2 r_size - 1) / (2n))`.
    pub finite: f64,
    /// `max(0, (H(a,b) - 2 H(a xor b)) / 2)`.
    pub asymptotic: f64,
}

/// Lower bound on any adversary's probability of failing to recover both
/// sequences of the designated pair.
pub fn fano_bound(model: &SourceModel, n: usize, r_size: usize) -> Result<FanoBound, AspError> {
    if n == 0 || r_size > n {
        return Err(AspError::InvalidParameter(format!(
            "need 0 <= r_size <= n and n >= 1, got n={n}, r_size={r_size}"
        )));
    }
    let d = model.diagnostics;
    let nf = n as f64;
    Ok(FanoBound {
        n,
        r_size,
        h_joint: d.h_joint,
        h_xor: d.h_xor,
        finite: ((nf * d.h_joint - 2.0 * r_size as f64 - 1.0) / (2.0 * nf)).max(0.0),
        asymptotic: (d.gap / 2.0).max(0.0),
    })
}

fn gather(word: u64, positions: &[usize]) -> u64 {
    positions
        .iter()
        .enumerate()
        .fold(0, |acc, (k, &i)| acc | (((word >> i) & 1) << k))
}

fn scatter(bits: u64, positions: &[usize]) -> u64 {
    positions
        .iter()
        .enumerate()
        .fold(0, |acc, (k, &i)| acc | (((bits >> k) & 1) << i))
}

fn to_word(s: &BitSequence) -> u64 {
    s.iter()
        .enumerate()
        .fold(0, |acc, (i, b)| acc | ((b as u64) << i))
}

fn from_word(w: u64, n: usize) -> BitSequence {
    BitSequence::from_bools((0..n).map(|i| (w >> i) & 1 == 1))
}

/// Sequences compared from index 0 as the most significant position.
fn lex_key(w: u64, n: usize) -> u64 {
    if n == 0 {
        0
    } else {
        w.reverse_bits() >> (64 - n)
    }
}

/// Per-position likelihood tables: `weight(x, y, z) = prod_i mass[x_i y_i][z_i]`.
struct SymbolWeights {
    n: usize,
    /// `pow[ab][c][k] = mass(ab, c)^k`.
    pow: [[Vec<f64>; 2]; 4],
    log: [[f64; 2]; 4],
}

impl SymbolWeights {
    fn new(masses: [[f64; 2]; 4], n: usize) -> Self {
        let pow = masses.map(|row| row.map(|m| (0..=n).map(|k| m.powi(k as i32)).collect()));
        let log = masses.map(|row| row.map(f64::ln));
        Self { n, pow, log }
    }

    fn counts(&self, x: u64, y: u64, z: u64) -> [[u32; 2]; 4] {
        let full = if self.n == 64 {
            u64::MAX
        } else {
            (1u64 << self.n) - 1
        };
        let cells = [!x & !y & full, !x & y, x & !y, x & y];
        cells.map(|m| [(m & !z).count_ones(), (m & z).count_ones()])
    }

    fn weight(&self, x: u64, y: u64, z: u64) -> f64 {
        let counts = self.counts(x, y, z);
        let mut w = 1.0;
        for (pow, count) in self.pow.iter().zip(&counts) {
            for (table, &k) in pow.iter().zip(count) {
                w *= table[k as usize];
            }
        }
        w
    }

    fn log_weight(&self, x: u64, y: u64, z: u64) -> f64 {
        let counts = self.counts(x, y, z);
        let mut lw = 0.0;
        for (log, count) in self.log.iter().zip(&counts) {
            for (&l, &k) in log.iter().zip(count) {
                if k > 0 {
                    lw += k as f64 * l;
                }
            }
        }
        lw
    }
}

fn role_table(model: &SourceModel) -> [[f64; 2]; 4] {
    let m = &model.role_masses;
    [[m[0], m[1]], [m[2], m[3]], [m[4], m[5]], [m[6], m[7]]]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapEstimate {
    pub first: BitSequence,
    pub second: BitSequence,
}

/// Exact joint MAP estimate of the pair's sequences from the decoder's view:
/// the two received blocks and its own sequence. Ties within a relative
/// 1e-12 go to the lexicographically smallest `(first, second)`.
pub fn map_attack(
    model: &SourceModel,
    set: &IndexSet,
    received_first: &BitSequence,
    received_second: &BitSequence,
    own: &BitSequence,
) -> Result<MapEstimate, AspError> {
    let n = set.n;
    if n > MAP_ATTACK_MAX_N {
        return Err(AspError::TooLargeForExact {
            n,
            limit: MAP_ATTACK_MAX_N,
        });
    }
    for (len, expected) in [
        (received_first.len(), set.len()),
        (received_second.len(), set.len()),
        (own.len(), n),
    ] {
        if len != expected {
            return Err(PolarError::LengthMismatch { expected, got: len }.into());
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| !set.contains(i)).collect();
    let candidates = |received: &BitSequence| -> Vec<u64> {
        let fixed = scatter(to_word(received), &set.indices);
        (0..1u64 << free.len())
            .map(|u| transform_u64(fixed | scatter(u, &free), n))
            .collect()
    };
    let xs = candidates(received_first);
    let ys = candidates(received_second);
    let z = to_word(own);
    let weights = SymbolWeights::new(role_table(model), n);

    let mut best: Option<(f64, (u64, u64), u64, u64)> = None;
    for &x in &xs {
        for &y in &ys {
            let lw = weights.log_weight(x, y, z);
            if lw == f64::NEG_INFINITY {
                continue;
            }
            let key = (lex_key(x, n), lex_key(y, n));
            let replace = match best {
                None => true,
                Some((b, bkey, _, _)) => {
                    if lw - b > TIE_TOLERANCE {
                        true
                    } else {
                        (lw - b).abs() <= TIE_TOLERANCE && key < bkey
                    }
                }
            };
            if replace {
                best = Some((lw, key, x, y));
            }
        }
    }
    let (x, y) = best.map_or((xs[0], ys[0]), |(_, _, x, y)| (x, y));
    Ok(MapEstimate {
        first: from_word(x, n),
        second: from_word(y, n),
    })
}

/// Exact error probabilities of the optimal adversary at the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapErrorRates {
    /// P(MAP estimate of the pair differs from the pair).
    pub joint: f64,
    /// P(MAP estimate of the first sender's sequence is wrong).
    pub first: f64,
    /// P(MAP estimate of the second sender's sequence is wrong).
    pub second: f64,
}

/// Error of the MAP adversary by exhaustive enumeration of every source
/// outcome: `1 - sum over views of the largest candidate mass`.
pub fn exact_map_errors(model: &SourceModel, set: &IndexSet) -> Result<MapErrorRates, AspError> {
    let n = set.n;
    let independent = model.decoder_independent();
    let limit = if independent {
        EXACT_ERROR_MAX_N
    } else {
        EXACT_ERROR_MAX_N_CORRELATED
    };
    if n > limit {
        return Err(AspError::TooLargeForExact { n, limit });
    }
    let table = if independent {
        model.pair_masses().map(|m| [m, 0.0])
    } else {
        role_table(model)
    };
    let weights = SymbolWeights::new(table, n);
    let k = set.len();
    let size = 1usize << n;
    let keys: Vec<usize> = (0..size as u64)
        .map(|v| gather(transform_u64(v, n), &set.indices) as usize)
        .collect();
    let z_values: Vec<u64> = if independent {
        vec![0]
    } else {
        (0..size as u64).collect()
    };

    let mut joint_hits = Vec::new();
    let mut first_hits = Vec::new();
    let mut second_hits = Vec::new();
    let mut best = vec![0.0f64; 1 << (2 * k)];
    let mut by_first = vec![0.0f64; size << k];
    let mut by_second = vec![0.0f64; size << k];
    let mut best_first = vec![0.0f64; 1 << (2 * k)];
    let mut best_second = vec![0.0f64; 1 << (2 * k)];
    for &z in &z_values {
        best.fill(0.0);
        by_first.fill(0.0);
        by_second.fill(0.0);
        for x in 0..size {
            for y in 0..size {
                let w = weights.weight(x as u64, y as u64, z);
                let view = (keys[x] << k) | keys[y];
                if w > best[view] {
                    best[view] = w;
                }
                by_first[(x << k) | keys[y]] += w;
                by_second[(y << k) | keys[x]] += w;
            }
        }
        best_first.fill(0.0);
        best_second.fill(0.0);
        for v in 0..size {
            for other in 0..(1usize << k) {
                let slot = (keys[v] << k) | other;
                best_first[slot] = best_first[slot].max(by_first[(v << k) | other]);
                best_second[slot] = best_second[slot].max(by_second[(v << k) | other]);
            }
        }
        joint_hits.push(stable_sum(best.iter().copied()));
        first_hits.push(stable_sum(best_first.iter().copied()));
        second_hits.push(stable_sum(best_second.iter().copied()));
    }
    Ok(MapErrorRates {
        joint: (1.0 - stable_sum(joint_hits)).max(0.0),
        first: (1.0 - stable_sum(first_hits)).max(0.0),
        second: (1.0 - stable_sum(second_hits)).max(0.0),
    })
}

/// Given the first sequence and the pair's sum, the second is determined.
pub fn complete_pair(first: &BitSequence, sum: &BitSequence) -> Result<BitSequence, AspError> {
    Ok(first.xor(sum)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Exact,
    Sampled,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssessmentFlag {
    /// No pair has a positive gap; the bound is vacuous.
    NotAdditivelyCorrelated,
    /// The pair's sum is constant, so nothing is transmitted.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityAssessment {
    pub n: usize,
    pub epsilon: f64,
    pub r_size: usize,
    pub fano: FanoBound,
    pub attack: AttackMode,
    /// Joint recovery error of the attack, if one was run.
    pub attack_error_rate: Option<f64>,
    /// Exact single-sequence MAP errors (exact attack only).
    pub single_sequence_errors: Option<(f64, f64)>,
    /// The attack error is a Monte Carlo estimate of a heuristic attack.
    pub attack_is_estimate: bool,
    pub trials: usize,
    pub flags: Vec<AssessmentFlag>,
}

impl SecurityAssessment {
    /// The attack did at least as badly as the Fano bound demands.
    pub fn bound_respected(&self) -> Option<bool> {
        self.attack_error_rate
            .map(|e| e >= self.fano.finite - ENTROPY_TOLERANCE)
    }
}

/// Sampled attack: SC-decode the first sequence from its own block under
/// its marginal prior, then complete the pair with the decoded sum.
fn sampled_attack_errors(
    model: &SourceModel,
    set: &IndexSet,
    trials: usize,
    seed: u64,
) -> Result<usize, AspError> {
    let session = AspSession::with_set(model, set.clone());
    let prior = model.first_probability();
    let (a, b) = model.pair;
    let wrong: Result<Vec<bool>, AspError> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let run = session.trial(seed, t)?;
            let block = &run.received[model.decoder];
            let first_block = &block
                .iter()
                .find(|r| r.from == a)
                .expect("sender block")
                .bits;
            let x_hat = polar_transform(&sc_decode(first_block, set, prior)?)?;
            let y_hat = complete_pair(&x_hat, &run.decoded_sum)?;
            Ok(x_hat != run.source.sequences[a] || y_hat != run.source.sequences[b])
        })
        .collect();
    Ok(wrong?.into_iter().filter(|&w| w).count())
}

/// Fano bound plus, optionally, an attack on the decoder's view. Works on
/// any three-bit model; vacuous cases are flagged rather than refused.
pub fn security_assessment(
    model: &SourceModel,
    n: usize,
    epsilon: f64,
    profile: &PolarProfile,
    attack: AttackMode,
    trials: usize,
    seed: u64,
) -> Result<SecurityAssessment, AspError> {
    let set = transmitted_set(model, n, epsilon, profile)?;
    let fano = fano_bound(model, n, set.len())?;
    let mut flags = Vec::new();
    if !model.is_additively_correlated() {
        flags.push(AssessmentFlag::NotAdditivelyCorrelated);
    }
    if model.is_degenerate() {
        flags.push(AssessmentFlag::Degenerate);
    }
    let (attack_error_rate, single_sequence_errors, estimate, trials) = match attack {
        AttackMode::Exact => {
            let rates = exact_map_errors(model, &set)?;
            (
                Some(rates.joint),
                Some((rates.first, rates.second)),
                false,
                0,
            )
        }
        AttackMode::Sampled => {
            if trials == 0 {
                return Err(AspError::InvalidParameter(
                    "sampled attack needs trials >= 1".into(),
                ));
            }
            let errors = sampled_attack_errors(model, &set, trials, seed)?;
            (Some(errors as f64 / trials as f64), None, true, trials)
        }
        AttackMode::None => (None, None, false, 0),
    };
    Ok(SecurityAssessment {
        n,
        epsilon,
        r_size: set.len(),
        fano,
        attack,
        attack_error_rate,
        single_sequence_errors,
        attack_is_estimate: estimate,
        trials,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infotheory::{binary_entropy, Variable};
    use crate::polarsrc::{construct, construct_exact};
    use approx::assert_abs_diff_eq;

    fn three(f: impl Fn(&[usize]) -> f64) -> JointDistribution {
        JointDistribution::from_fn(
            vec![Variable::bit("X"), Variable::bit("Y"), Variable::bit("Z")],
            f,
        )
        .unwrap()
    }

    fn copy_model() -> SourceModel {
        SourceModel::new(three(|t| if t[0] == t[1] { 0.25 } else { 0.0 })).unwrap()
    }

    fn uniform_model() -> SourceModel {
        SourceModel::new(three(|_| 0.125)).unwrap()
    }

    #[test]
    fn designation() {
        let m = SourceModel::bsc(0.1).unwrap();
        assert_eq!(m.pair(), (0, 1));
        assert_eq!(m.decoder(), 2);
        assert_abs_diff_eq!(m.xor_probability(), 0.1, epsilon = 1e-15);
        assert!(m.is_additively_correlated());

        // Y uniform, X = Z xor Ber(0.05): the (X, Z) pair wins
        let m = SourceModel::new(three(|t| 0.25 * if t[0] == t[2] { 0.95 } else { 0.05 })).unwrap();
        assert_eq!(m.pair(), (0, 2));
        assert_eq!(m.decoder(), 1);

        assert!(!uniform_model().is_additively_correlated());
        let four = JointDistribution::uniform_independent(4).unwrap();
        assert!(matches!(
            SourceModel::new(four),
            Err(AspError::NotThreeBits(_))
        ));
    }

    #[test]
    fn sampling() {
        let point =
            SourceModel::new(three(|t| if t.iter().all(|&b| b == 0) { 1.0 } else { 0.0 })).unwrap();
        let s = sample_source(&point, 50, 3);
        assert!(s.sequences.iter().all(|q| q.count_ones() == 0));

        let n = 100_000;
        let u = sample_source(&uniform_model(), n, 11);
        assert!((u.sequences[0].count_ones() as f64 / n as f64 - 0.5).abs() < 0.01);

        let m = SourceModel::bsc(0.1).unwrap();
        let s = sample_source(&m, n, 12);
        let differ = s.sequences[0].xor(&s.sequences[1]).unwrap().count_ones();
        assert!((differ as f64 / n as f64 - 0.1).abs() < 0.01);
        assert_eq!(sample_source(&m, 64, 5), sample_source(&m, 64, 5));
    }

    #[test]
    fn run_structure() {
        let m = SourceModel::bsc(0.1).unwrap();
        let prof = construct_exact(0.1, 16).unwrap();
        let run = run_asp(&m, 16, 0.2, &prof, 8).unwrap();
        let r = run.r_size;
        assert_eq!(
            run.links,
            vec![
                LinkTraffic {
                    from: 0,
                    to: 2,
                    bits: r
                },
                LinkTraffic {
                    from: 1,
                    to: 2,
                    bits: r
                },
                LinkTraffic {
                    from: 2,
                    to: 0,
                    bits: 16
                },
                LinkTraffic {
                    from: 2,
                    to: 1,
                    bits: 16
                },
            ]
        );
        for p in [0, 1] {
            assert_eq!(run.received[p].len(), 1);
            assert_eq!(run.received[p][0].from, 2);
            assert_eq!(run.received[p][0].bits, run.outputs[2]);
        }
        assert_eq!(run.received[2].len(), 2);
        assert!(run.received[2].iter().all(|b| b.bits.len() == r));
        assert_eq!(run.block_correct, run.outputs[0] == run.truth);

        assert!(matches!(
            run_asp(&m, 32, 0.2, &prof, 8),
            Err(AspError::ProfileMismatch { .. })
        ));
        let wrong_p = construct_exact(0.2, 16).unwrap();
        assert!(matches!(
            run_asp(&m, 16, 0.2, &wrong_p, 8),
            Err(AspError::ProfileMismatch { .. })
        ));
        let flat = construct_exact(0.5, 16).unwrap();
        assert!(matches!(
            run_asp(&uniform_model(), 16, 0.5, &flat, 1),
            Err(AspError::NotAdditivelyCorrelated { .. })
        ));
    }

    #[test]
    fn copy_model_is_exact() {
        let m = copy_model();
        let prof = construct(0.0, 256, 200, 1).unwrap();
        for seed in 0..20 {
            let run = run_asp(&m, 256, 0.1, &prof, seed).unwrap();
            assert_eq!(run.r_size, 0);
            assert_eq!(run.decoded_sum.count_ones(), 0);
            assert!(run.block_correct);
        }
    }

    #[test]
    fn fano_examples() {
        let m = SourceModel::bsc(0.1).unwrap();
        let b = fano_bound(&m, 8, 4).unwrap();
        assert_abs_diff_eq!(b.finite, 0.1720, epsilon = 1e-3);
        assert_abs_diff_eq!(b.asymptotic, 0.2655, epsilon = 1e-3);
        assert_abs_diff_eq!(
            fano_bound(&uniform_model(), 8, 0).unwrap().asymptotic,
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            fano_bound(&copy_model(), 8, 0).unwrap().asymptotic,
            0.5,
            epsilon = 1e-12
        );
        assert_eq!(fano_bound(&m, 8, 8).unwrap().finite, 0.0);
        assert!(fano_bound(&m, 8, 9).is_err());
    }

    /// Joint MAP error by brute force over (x, y, z) and all views.
    fn brute_force_joint_error(model: &SourceModel, set: &IndexSet) -> f64 {
        let n = set.n;
        let w = SymbolWeights::new(role_table(model), n);
        let mut best = std::collections::HashMap::<(u64, u64, u64), f64>::new();
        for x in 0..1u64 << n {
            for y in 0..1u64 << n {
                for z in 0..1u64 << n {
                    let view = (
                        gather(transform_u64(x, n), &set.indices),
                        gather(transform_u64(y, n), &set.indices),
                        z,
                    );
                    let e = best.entry(view).or_insert(0.0);
                    *e = e.max(w.weight(x, y, z));
                }
            }
        }
        1.0 - best.values().sum::<f64>()
    }

    #[test]
    fn exact_errors_match_brute_force() {
        let correlated = SourceModel::new(three(|t| {
            let base = if t[0] == t[1] { 0.4 } else { 0.1 };
            base * if t[2] == t[0] { 0.7 } else { 0.3 }
        }))
        .unwrap();
        for model in [SourceModel::bsc(0.1).unwrap(), correlated] {
            let p = model.xor_probability();
            for n in [2usize, 4] {
                let prof = construct_exact(p, n).unwrap();
                for eps in [0.01, 0.5, 0.99] {
                    let set = high_entropy_set(&prof, eps).unwrap();
                    let exact = exact_map_errors(&model, &set).unwrap();
                    assert_abs_diff_eq!(
                        exact.joint,
                        brute_force_joint_error(&model, &set),
                        epsilon = 1e-12
                    );
                    assert!(
                        exact.first <= exact.joint + 1e-12 && exact.second <= exact.joint + 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn exact_error_corners() {
        let m = SourceModel::bsc(0.1).unwrap();
        let all = IndexSet::all(8);
        assert_abs_diff_eq!(
            exact_map_errors(&m, &all).unwrap().joint,
            0.0,
            epsilon = 1e-12
        );
        let none = IndexSet::empty(8);
        // most likely pair symbol has mass 0.45
        let expected = 1.0 - 0.45f64.powi(8);
        assert_abs_diff_eq!(
            exact_map_errors(&m, &none).unwrap().joint,
            expected,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            exact_map_errors(&copy_model(), &IndexSet::empty(6))
                .unwrap()
                .joint,
            1.0 - 0.5f64.powi(6),
            epsilon = 1e-12
        );
        assert!(matches!(
            exact_map_errors(&m, &IndexSet::empty(16)),
            Err(AspError::TooLargeForExact { .. })
        ));
    }

    #[test]
    fn map_attack_consistent_with_exact_rate() {
        // averaging the single-view attack over all outcomes reproduces the exact joint error
        let m = SourceModel::bsc(0.2).unwrap();
        let n = 4;
        let set = high_entropy_set(&construct_exact(0.2, n).unwrap(), 0.5).unwrap();
        let w = SymbolWeights::new(role_table(&m), n);
        let z = BitSequence::zeros(n);
        let mut miss = 0.0;
        for x in 0..1u64 << n {
            for y in 0..1u64 << n {
                let bx = from_word(x, n);
                let by = from_word(y, n);
                let rx = polar_transform(&bx).unwrap().select(&set).unwrap();
                let ry = polar_transform(&by).unwrap().select(&set).unwrap();
                let est = map_attack(&m, &set, &rx, &ry, &z).unwrap();
                if est.first != bx || est.second != by {
                    miss += (1u64 << n) as f64 * w.weight(x, y, 0);
                }
            }
        }
        assert_abs_diff_eq!(
            miss,
            exact_map_errors(&m, &set).unwrap().joint,
            epsilon = 1e-12
        );
    }

    #[test]
    fn map_attack_corners() {
        let m = SourceModel::bsc(0.1).unwrap();
        let all = IndexSet::all(8);
        let s = sample_source(&m, 8, 4);
        let rx = polar_transform(&s.sequences[0]).unwrap();
        let ry = polar_transform(&s.sequences[1]).unwrap();
        let est = map_attack(&m, &all, &rx, &ry, &s.sequences[2]).unwrap();
        assert_eq!(est.first, s.sequences[0]);
        assert_eq!(est.second, s.sequences[1]);
        // no information: X=Y=0 and X=Y=1 tie, lexicographic picks zeros
        let none = IndexSet::empty(4);
        let e = map_attack(
            &m,
            &none,
            &BitSequence::zeros(0),
            &BitSequence::zeros(0),
            &BitSequence::zeros(4),
        )
        .unwrap();
        assert_eq!(e.first, BitSequence::zeros(4));
        assert_eq!(e.second, BitSequence::zeros(4));
        assert!(map_attack(
            &m,
            &IndexSet::empty(16),
            &BitSequence::zeros(0),
            &BitSequence::zeros(0),
            &BitSequence::zeros(16)
        )
        .is_err());
    }

    #[test]
    fn fano_validity_exhaustive() {
        let models = [
            SourceModel::bsc(0.1).unwrap(),
            SourceModel::bsc(0.02).unwrap(),
            SourceModel::bsc(0.3).unwrap(),
            SourceModel::new(three(|t| {
                let base = if t[0] == t[1] { 0.42 } else { 0.08 };
                base * if t[2] == 1 { 0.6 } else { 0.4 }
            }))
            .unwrap(),
        ];
        for model in &models {
            for n in [1usize, 2, 4, 8] {
                let prof = construct_exact(model.xor_probability(), n).unwrap();
                for eps in [0.05, 0.5, 0.9] {
                    let set = high_entropy_set(&prof, eps).unwrap();
                    let err = exact_map_errors(model, &set).unwrap().joint;
                    let bound = fano_bound(model, n, set.len()).unwrap().finite;
                    assert!(err >= bound - 1e-9, "n={n} eps={eps}: {err} < {bound}");
                }
            }
        }
    }

    #[test]
    fn sum_and_one_sequence_determine_the_other() {
        let m = SourceModel::bsc(0.1).unwrap();
        let n = 8;
        let set = high_entropy_set(&construct_exact(0.1, n).unwrap(), 0.1).unwrap();
        let session = AspSession::with_set(&m, set);
        let mut correct = 0;
        for seed in 0..300 {
            let run = session.run(seed).unwrap();
            if run.decoded_sum
                == run.source.sequences[0]
                    .xor(&run.source.sequences[1])
                    .unwrap()
            {
                correct += 1;
                let (x, y) = (&run.source.sequences[0], &run.source.sequences[1]);
                assert_eq!(&complete_pair(x, &run.decoded_sum).unwrap(), y);
                assert_eq!(&complete_pair(y, &run.decoded_sum).unwrap(), x);
            }
        }
        assert!(correct > 0);
    }

    #[test]
    fn assessments() {
        let m = SourceModel::bsc(0.1).unwrap();
        let prof = construct_exact(0.1, 8).unwrap();
        let a = security_assessment(&m, 8, 0.5, &prof, AttackMode::Exact, 0, 0).unwrap();
        assert!(a.fano.finite > 0.0);
        assert_eq!(a.bound_respected(), Some(true));
        assert!(a.flags.is_empty());

        let flat = construct_exact(0.5, 8).unwrap();
        let u =
            security_assessment(&uniform_model(), 8, 0.5, &flat, AttackMode::None, 0, 0).unwrap();
        assert_eq!(u.fano.asymptotic, 0.0);
        assert_eq!(u.flags, vec![AssessmentFlag::NotAdditivelyCorrelated]);

        let zero = construct_exact(0.0, 8).unwrap();
        let c = security_assessment(&copy_model(), 8, 0.5, &zero, AttackMode::Exact, 0, 0).unwrap();
        assert_eq!(c.r_size, 0);
        assert_abs_diff_eq!(c.fano.asymptotic, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(
            c.attack_error_rate.unwrap(),
            1.0 - 0.5f64.powi(8),
            epsilon = 1e-12
        );
        assert!(c.flags.contains(&AssessmentFlag::Degenerate));

        let big = construct(0.1, 256, 400, 2).unwrap();
        let s = security_assessment(&m, 256, 0.01, &big, AttackMode::Sampled, 50, 3).unwrap();
        assert!(s.attack_is_estimate);
        assert!(s.attack_error_rate.unwrap() >= s.fano.finite);
        assert!((s.fano.h_joint - (1.0 + binary_entropy(0.1))).abs() < 1e-12);
    }
}
