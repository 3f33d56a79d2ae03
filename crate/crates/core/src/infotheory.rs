//! Exact Shannon quantities over small finite alphabets.
//!
//! Two table shapes share one entropy kernel: [`JointDistribution`] is a dense
//! row-major table used for user-supplied source models, and [`OutcomeTable`]
//! is a sparse map from outcome tuples to mass used by the protocol analyzer,
//! whose view alphabets are too large to lay out densely. All logarithms are
//! base 2.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance under which two entropies are considered equal.
pub const ENTROPY_TOLERANCE: f64 = 1e-9;

/// Allowed deviation of a table's total mass from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

/// Largest dense table, measured in bits of joint alphabet.
pub const MAX_TABLE_BITS: f64 = 24.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error("unknown variable label `{0}`")]
    UnknownLabel(String),
    #[error("duplicate variable label `{0}`")]
    DuplicateLabel(String),
    #[error("label `{0}` appears in both target and conditioning sets")]
    OverlappingLabels(String),
    #[error("variable `{0}` is not binary")]
    NonBinary(String),
    #[error("variable subset must not be empty")]
    EmptySubset,
    #[error("table is not normalized: total mass {0}")]
    Unnormalized(f64),
    #[error("negative or non-finite probability {value} at cell {cell}")]
    InvalidProbability { cell: usize, value: f64 },
    #[error("table has {got} cells but the alphabets require {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("joint alphabet of {bits:.1} bits exceeds the {MAX_TABLE_BITS}-bit limit")]
    TooLarge { bits: f64 },
    #[error("alphabet size of `{0}` must be positive")]
    EmptyAlphabet(String),
    #[error("invalid preset parameter: {0}")]
    InvalidParameter(String),
    #[error("outcome tuple has arity {got}, table expects {expected}")]
    ArityMismatch { expected: usize, got: usize },
}

/// Compensated summation; the dense tables reach 2^24 cells.
pub(crate) fn stable_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Shannon entropy of a probability mass function, 0·log 0 = 0.
pub fn entropy_of_masses<I: IntoIterator<Item = f64>>(masses: I) -> f64 {
    stable_sum(
        masses
            .into_iter()
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.log2()),
    )
}

/// Entropy of a Bernoulli(p) variable.
pub fn binary_entropy(p: f64) -> f64 {
    entropy_of_masses([p, 1.0 - p])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub alphabet_size: usize,
}

impl Variable {
    pub fn new(name: impl Into<String>, alphabet_size: usize) -> Self {
        Self {
            name: name.into(),
            alphabet_size,
        }
    }

    pub fn bit(name: impl Into<String>) -> Self {
        Self::new(name, 2)
    }
}

/// Dense probability table over a tuple of finite-alphabet variables.
///
/// Cells are stored row-major: the last variable varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointDistribution {
    variables: Vec<Variable>,
    probabilities: Vec<f64>,
}

impl JointDistribution {
    pub fn new(variables: Vec<Variable>, probabilities: Vec<f64>) -> Result<Self, InfoError> {
        let mut bits = 0.0;
        for (i, v) in variables.iter().enumerate() {
            if v.alphabet_size == 0 {
                return Err(InfoError::EmptyAlphabet(v.name.clone()));
            }
            if variables[..i].iter().any(|w| w.name == v.name) {
                return Err(InfoError::DuplicateLabel(v.name.clone()));
            }
            bits += (v.alphabet_size as f64).log2();
        }
        if bits > MAX_TABLE_BITS + 1e-12 {
            return Err(InfoError::TooLarge { bits });
        }
        let expected: usize = variables.iter().map(|v| v.alphabet_size).product();
        if probabilities.len() != expected {
            return Err(InfoError::ShapeMismatch {
                expected,
                got: probabilities.len(),
            });
        }
        for (cell, &value) in probabilities.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(InfoError::InvalidProbability { cell, value });
            }
        }
        let total = stable_sum(probabilities.iter().copied());
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(InfoError::Unnormalized(total));
        }
        Ok(Self {
            variables,
            probabilities,
        })
    }

    /// Builds a table by evaluating `mass` on every value tuple.
    pub fn from_fn<F>(variables: Vec<Variable>, mut mass: F) -> Result<Self, InfoError>
    where
        F: FnMut(&[usize]) -> f64,
    {
        let sizes: Vec<usize> = variables.iter().map(|v| v.alphabet_size).collect();
        let cells: usize = sizes.iter().product();
        let mut probabilities = Vec::with_capacity(cells);
        let mut tuple = vec![0usize; sizes.len()];
        for _ in 0..cells {
            probabilities.push(mass(&tuple));
            advance_mixed_radix(&mut tuple, &sizes);
        }
        Self::new(variables, probabilities)
    }

    /// `k` independent uniform variables with the given alphabet sizes.
    pub fn uniform(variables: Vec<Variable>) -> Result<Self, InfoError> {
        let cells: usize = variables.iter().map(|v| v.alphabet_size).product();
        let mass = 1.0 / cells as f64;
        Self::from_fn(variables, |_| mass)
    }

    /// `m` independent uniform bits labelled `X1..Xm`.
    pub fn uniform_independent(m: usize) -> Result<Self, InfoError> {
        if m == 0 {
            return Err(InfoError::InvalidParameter("m must be at least 1".into()));
        }
        Self::uniform((1..=m).map(|i| Variable::bit(format!("X{i}"))).collect())
    }

    /// X ~ Ber(1/2) and Y = X xor N with N ~ Ber(p) independent of X.
    pub fn bsc_pair(p: f64) -> Result<Self, InfoError> {
        check_probability(p)?;
        Self::from_fn(vec![Variable::bit("X"), Variable::bit("Y")], |t| {
            0.5 * if t[0] == t[1] { 1.0 - p } else { p }
        })
    }

    /// `bsc_pair(p)` extended with an independent uniform bit Z.
    pub fn bsc_triple(p: f64) -> Result<Self, InfoError> {
        check_probability(p)?;
        Self::from_fn(
            vec![Variable::bit("X"), Variable::bit("Y"), Variable::bit("Z")],
            |t| 0.25 * if t[0] == t[1] { 1.0 - p } else { p },
        )
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn alphabet_sizes(&self) -> Vec<usize> {
        self.variables.iter().map(|v| v.alphabet_size).collect()
    }

    pub fn index_of(&self, label: &str) -> Result<usize, InfoError> {
        self.variables
            .iter()
            .position(|v| v.name == label)
            .ok_or_else(|| InfoError::UnknownLabel(label.to_string()))
    }

    fn indices_of(&self, labels: &[&str]) -> Result<Vec<usize>, InfoError> {
        labels.iter().map(|l| self.index_of(l)).collect()
    }

    /// Iterates `(value tuple, mass)` over every cell.
    pub fn cells(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        let sizes = self.alphabet_sizes();
        let mut tuple = vec![0usize; sizes.len()];
        self.probabilities.iter().map(move |&p| {
            let current = tuple.clone();
            advance_mixed_radix(&mut tuple, &sizes);
            (current, p)
        })
    }

    /// Mass function of the marginal on the given variable positions.
    pub fn marginal_masses(&self, positions: &[usize]) -> Vec<f64> {
        let sizes = self.alphabet_sizes();
        let cells: usize = positions.iter().map(|&i| sizes[i]).product();
        let mut out = vec![0.0; cells];
        for (tuple, p) in self.cells() {
            let mut idx = 0usize;
            for &i in positions {
                idx = idx * sizes[i] + tuple[i];
            }
            out[idx] += p;
        }
        out
    }

    /// Marginal distribution on the named variables, in the given order.
    pub fn marginal(&self, labels: &[&str]) -> Result<JointDistribution, InfoError> {
        if labels.is_empty() {
            return Err(InfoError::EmptySubset);
        }
        let positions = self.indices_of(labels)?;
        let variables = positions
            .iter()
            .map(|&i| self.variables[i].clone())
            .collect();
        JointDistribution::new(variables, self.marginal_masses(&positions))
    }

    fn check_binary(&self, label: &str) -> Result<usize, InfoError> {
        let i = self.index_of(label)?;
        if self.variables[i].alphabet_size != 2 {
            return Err(InfoError::NonBinary(label.to_string()));
        }
        Ok(i)
    }

    /// Mass of `(a, b)` over the four binary pairs, indexed `2a + b`.
    pub fn pair_masses(&self, a: &str, b: &str) -> Result<[f64; 4], InfoError> {
        let ia = self.check_binary(a)?;
        let ib = self.check_binary(b)?;
        if ia == ib {
            return Err(InfoError::OverlappingLabels(a.to_string()));
        }
        let m = self.marginal_masses(&[ia, ib]);
        Ok([m[0], m[1], m[2], m[3]])
    }
}

fn check_probability(p: f64) -> Result<(), InfoError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(InfoError::InvalidParameter(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

pub(crate) fn advance_mixed_radix(tuple: &mut [usize], sizes: &[usize]) {
    for i in (0..tuple.len()).rev() {
        tuple[i] += 1;
        if tuple[i] < sizes[i] {
            return;
        }
        tuple[i] = 0;
    }
}

/// Read access shared by the dense and sparse tables.
pub trait Entropic {
    fn labels(&self) -> Vec<&str>;

    /// Entropy of the marginal on the given variable positions.
    fn marginal_entropy(&self, positions: &[usize]) -> f64;

    fn total_mass(&self) -> f64;

    fn position(&self, label: &str) -> Result<usize, InfoError> {
        self.labels()
            .iter()
            .position(|l| *l == label)
            .ok_or_else(|| InfoError::UnknownLabel(label.to_string()))
    }

    fn positions(&self, labels: &[&str]) -> Result<Vec<usize>, InfoError> {
        labels.iter().map(|l| self.position(l)).collect()
    }
}

impl Entropic for JointDistribution {
    fn labels(&self) -> Vec<&str> {
        self.variables.iter().map(|v| v.name.as_str()).collect()
    }

    fn marginal_entropy(&self, positions: &[usize]) -> f64 {
        entropy_of_masses(self.marginal_masses(positions))
    }

    fn total_mass(&self) -> f64 {
        stable_sum(self.probabilities.iter().copied())
    }
}

/// Sparse joint table keyed by outcome tuples of interned symbols.
#[derive(Debug, Clone, Default)]
pub struct OutcomeTable {
    labels: Vec<String>,
    masses: HashMap<Vec<u32>, f64>,
}

impl OutcomeTable {
    pub fn new(labels: Vec<String>) -> Self {
        Self {
            labels,
            masses: HashMap::new(),
        }
    }

    pub fn add(&mut self, outcome: Vec<u32>, mass: f64) -> Result<(), InfoError> {
        if outcome.len() != self.labels.len() {
            return Err(InfoError::ArityMismatch {
                expected: self.labels.len(),
                got: outcome.len(),
            });
        }
        *self.masses.entry(outcome).or_insert(0.0) += mass;
        Ok(())
    }

    /// Adds every outcome of `other`; labels must agree.
    pub fn merge(&mut self, other: OutcomeTable) {
        debug_assert_eq!(self.labels, other.labels);
        for (k, v) in other.masses {
            *self.masses.entry(k).or_insert(0.0) += v;
        }
    }

    pub fn support_size(&self) -> usize {
        self.masses.len()
    }

    pub fn check_normalized(&self) -> Result<(), InfoError> {
        let total = self.total_mass();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(InfoError::Unnormalized(total));
        }
        Ok(())
    }
}

impl Entropic for OutcomeTable {
    fn labels(&self) -> Vec<&str> {
        self.labels.iter().map(String::as_str).collect()
    }

    fn marginal_entropy(&self, positions: &[usize]) -> f64 {
        let mut marginal: HashMap<Vec<u32>, f64> = HashMap::with_capacity(self.masses.len());
        for (outcome, &p) in &self.masses {
            let key: Vec<u32> = positions.iter().map(|&i| outcome[i]).collect();
            *marginal.entry(key).or_insert(0.0) += p;
        }
        // Sorted so that repeated evaluations sum in the same order.
        let mut masses: Vec<f64> = marginal.into_values().collect();
        masses.sort_by(|a, b| a.total_cmp(b));
        entropy_of_masses(masses)
    }

    fn total_mass(&self) -> f64 {
        let mut masses: Vec<f64> = self.masses.values().copied().collect();
        masses.sort_by(|a, b| a.total_cmp(b));
        stable_sum(masses)
    }
}

fn check_mass<T: Entropic + ?Sized>(table: &T) -> Result<(), InfoError> {
    let total = table.total_mass();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(InfoError::Unnormalized(total));
    }
    Ok(())
}

/// H(subset) in bits.
pub fn entropy<T: Entropic + ?Sized>(table: &T, subset: &[&str]) -> Result<f64, InfoError> {
    check_mass(table)?;
    if subset.is_empty() {
        return Err(InfoError::EmptySubset);
    }
    let positions = table.positions(subset)?;
    Ok(table.marginal_entropy(&dedup(positions)))
}

/// H(targets | given) = H(targets, given) - H(given).
pub fn conditional_entropy<T: Entropic + ?Sized>(
    table: &T,
    targets: &[&str],
    given: &[&str],
) -> Result<f64, InfoError> {
    check_mass(table)?;
    if targets.is_empty() {
        return Err(InfoError::EmptySubset);
    }
    if let Some(shared) = targets.iter().find(|t| given.contains(t)) {
        return Err(InfoError::OverlappingLabels(shared.to_string()));
    }
    let target_pos = table.positions(targets)?;
    let given_pos = table.positions(given)?;
    let mut joint = given_pos.clone();
    joint.extend(target_pos);
    let h_joint = table.marginal_entropy(&dedup(joint));
    let h_given = if given_pos.is_empty() {
        0.0
    } else {
        table.marginal_entropy(&dedup(given_pos))
    };
    Ok(h_joint - h_given)
}

fn dedup(mut positions: Vec<usize>) -> Vec<usize> {
    let mut seen = Vec::with_capacity(positions.len());
    positions.retain(|p| {
        if seen.contains(p) {
            false
        } else {
            seen.push(*p);
            true
        }
    });
    positions
}

/// Distribution of `a xor b` as a one-bit table labelled `a^b`.
pub fn xor_marginal(
    dist: &JointDistribution,
    a: &str,
    b: &str,
) -> Result<JointDistribution, InfoError> {
    let m = dist.pair_masses(a, b)?;
    let one = m[1] + m[2];
    JointDistribution::new(
        vec![Variable::bit(format!("{a}^{b}"))],
        vec![m[0] + m[3], one],
    )
}

/// Additive-correlation test for a binary pair: gap = H(a,b) - 2 H(a xor b).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationCertificate {
    pub pair: (String, String),
    pub gap: f64,
    pub is_additively_correlated: bool,
}

impl fmt::Display for CorrelationCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}): gap {:.6} bits, {}",
            self.pair.0,
            self.pair.1,
            self.gap,
            if self.is_additively_correlated {
                "additively correlated"
            } else {
                "not additively correlated"
            }
        )
    }
}

pub fn additive_correlation(
    dist: &JointDistribution,
    a: &str,
    b: &str,
) -> Result<CorrelationCertificate, InfoError> {
    let d = pair_diagnostics(dist, a, b)?;
    Ok(CorrelationCertificate {
        pair: (a.to_string(), b.to_string()),
        gap: d.gap,
        is_additively_correlated: d.gap > 0.0,
    })
}

/// Entropies of a binary pair used by the correlation and nesting checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairDiagnostics {
    pub h_joint: f64,
    pub h_a: f64,
    pub h_b: f64,
    pub h_xor: f64,
    /// H(a,b) - 2 H(a xor b).
    pub gap: f64,
    /// H(a | a xor b) - H(a xor b); has the sign of `gap`.
    pub conditional_margin: f64,
}

impl PairDiagnostics {
    /// Both single-variable entropies strictly exceed the XOR entropy.
    pub fn marginals_dominate_xor(&self) -> bool {
        self.h_a > self.h_xor && self.h_b > self.h_xor
    }
}

pub fn pair_diagnostics(
    dist: &JointDistribution,
    a: &str,
    b: &str,
) -> Result<PairDiagnostics, InfoError> {
    pair_diagnostics_from_masses(dist.pair_masses(a, b)?)
}

/// Same as [`pair_diagnostics`] from the four masses of `(a, b)`, indexed `2a + b`.
pub fn pair_diagnostics_from_masses(m: [f64; 4]) -> Result<PairDiagnostics, InfoError> {
    let total = stable_sum(m);
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(InfoError::Unnormalized(total));
    }
    let h_joint = entropy_of_masses(m);
    let h_a = entropy_of_masses([m[0] + m[1], m[2] + m[3]]);
    let h_b = entropy_of_masses([m[0] + m[2], m[1] + m[3]]);
    let h_xor = entropy_of_masses([m[0] + m[3], m[1] + m[2]]);
    // (a, a xor b) is a bijective relabelling of (a, b).
    let h_a_given_xor = h_joint - h_xor;
    Ok(PairDiagnostics {
        h_joint,
        h_a,
        h_b,
        h_xor,
        gap: h_joint - 2.0 * h_xor,
        conditional_margin: h_a_given_xor - h_xor,
    })
}

/// JSON description of a distribution: an explicit table or a named preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DistributionSpec {
    Table {
        variables: Vec<Variable>,
        probabilities: Vec<f64>,
    },
    Preset(Preset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum Preset {
    BscPair { p: f64 },
    BscTriple { p: f64 },
    UniformIndependent { m: usize },
}

impl DistributionSpec {
    pub fn build(&self) -> Result<JointDistribution, InfoError> {
        match self {
            DistributionSpec::Table {
                variables,
                probabilities,
            } => JointDistribution::new(variables.clone(), probabilities.clone()),
            DistributionSpec::Preset(Preset::BscPair { p }) => JointDistribution::bsc_pair(*p),
            DistributionSpec::Preset(Preset::BscTriple { p }) => JointDistribution::bsc_triple(*p),
            DistributionSpec::Preset(Preset::UniformIndependent { m }) => {
                JointDistribution::uniform_independent(*m)
            }
        }
    }
}

impl<'de> Deserialize<'de> for JointDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        DistributionSpec::deserialize(deserializer)?
            .build()
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn h(p: f64) -> f64 {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }

    #[test]
    fn entropy_examples() {
        let u = JointDistribution::uniform_independent(1).unwrap();
        assert_abs_diff_eq!(entropy(&u, &["X1"]).unwrap(), 1.0, epsilon = 1e-12);

        let b = JointDistribution::new(vec![Variable::bit("B")], vec![0.9, 0.1]).unwrap();
        assert_abs_diff_eq!(entropy(&b, &["B"]).unwrap(), 0.46899, epsilon = 1e-4);
        assert_abs_diff_eq!(entropy(&b, &["B"]).unwrap(), h(0.1), epsilon = 1e-12);

        let point =
            JointDistribution::new(vec![Variable::new("D", 3)], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&point, &["D"]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_errors() {
        let u = JointDistribution::uniform_independent(2).unwrap();
        assert_eq!(
            entropy(&u, &["Q"]),
            Err(InfoError::UnknownLabel("Q".into()))
        );
        assert_eq!(entropy(&u, &[]), Err(InfoError::EmptySubset));
        assert!(matches!(
            JointDistribution::new(vec![Variable::bit("A")], vec![0.5, 0.6]),
            Err(InfoError::Unnormalized(_))
        ));
        assert!(matches!(
            JointDistribution::new(vec![Variable::bit("A")], vec![1.5, -0.5]),
            Err(InfoError::InvalidProbability { cell: 1, .. })
        ));
        assert!(matches!(
            JointDistribution::uniform_independent(25),
            Err(InfoError::TooLarge { .. })
        ));
        assert!(JointDistribution::uniform_independent(24).is_ok());
    }

    #[test]
    fn conditional_entropy_examples() {
        let copy = JointDistribution::from_fn(vec![Variable::bit("X"), Variable::bit("Y")], |t| {
            if t[0] == t[1] {
                0.5
            } else {
                0.0
            }
        })
        .unwrap();
        assert_abs_diff_eq!(
            conditional_entropy(&copy, &["Y"], &["X"]).unwrap(),
            0.0,
            epsilon = 1e-12
        );

        let indep =
            JointDistribution::uniform(vec![Variable::bit("X"), Variable::bit("Y")]).unwrap();
        assert_abs_diff_eq!(
            conditional_entropy(&indep, &["Y"], &["X"]).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        let bsc = JointDistribution::bsc_pair(0.1).unwrap();
        // brute-force: H(X,Y) over the four cells minus H(X) = 1
        let brute = -[0.45f64, 0.05, 0.05, 0.45]
            .iter()
            .map(|p| p * p.log2())
            .sum::<f64>()
            - 1.0;
        let got = conditional_entropy(&bsc, &["Y"], &["X"]).unwrap();
        assert_abs_diff_eq!(got, brute, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.46899, epsilon = 1e-4);

        assert_eq!(
            conditional_entropy(&bsc, &["X", "Y"], &["Y"]),
            Err(InfoError::OverlappingLabels("Y".into()))
        );
    }

    #[test]
    fn xor_marginal_examples() {
        let indep =
            JointDistribution::uniform(vec![Variable::bit("X"), Variable::bit("Y")]).unwrap();
        assert_eq!(
            xor_marginal(&indep, "X", "Y").unwrap().probabilities(),
            &[0.5, 0.5]
        );

        let copy = JointDistribution::bsc_pair(0.0).unwrap();
        assert_eq!(
            xor_marginal(&copy, "X", "Y").unwrap().probabilities(),
            &[1.0, 0.0]
        );

        let bsc = JointDistribution::bsc_pair(0.1).unwrap();
        let x = xor_marginal(&bsc, "X", "Y").unwrap();
        // cells (0,1) and (1,0) carry 0.05 each
        assert_abs_diff_eq!(x.probabilities()[1], 0.1, epsilon = 1e-15);

        let ternary =
            JointDistribution::uniform(vec![Variable::bit("X"), Variable::new("T", 3)]).unwrap();
        assert_eq!(
            xor_marginal(&ternary, "X", "T"),
            Err(InfoError::NonBinary("T".into()))
        );
    }

    #[test]
    fn additive_correlation_examples() {
        let bsc = JointDistribution::bsc_pair(0.1).unwrap();
        let c = additive_correlation(&bsc, "X", "Y").unwrap();
        assert_abs_diff_eq!(c.gap, (1.0 + h(0.1)) - 2.0 * h(0.1), epsilon = 1e-12);
        assert_abs_diff_eq!(c.gap, 0.53101, epsilon = 1e-4);
        assert!(c.is_additively_correlated);

        let indep =
            JointDistribution::uniform(vec![Variable::bit("X"), Variable::bit("Y")]).unwrap();
        let c = additive_correlation(&indep, "X", "Y").unwrap();
        assert_abs_diff_eq!(c.gap, 0.0, epsilon = 1e-12);
        assert!(!c.is_additively_correlated);

        let copy = JointDistribution::bsc_pair(0.0).unwrap();
        let c = additive_correlation(&copy, "X", "Y").unwrap();
        assert_abs_diff_eq!(c.gap, 1.0, epsilon = 1e-12);
        assert!(c.is_additively_correlated);
    }

    #[test]
    fn json_table_and_presets() {
        let table: JointDistribution = serde_json::from_str(
            r#"{"variables":[{"name":"A","alphabet_size":2},{"name":"B","alphabet_size":2}],
                "probabilities":[0.45,0.05,0.05,0.45]}"#,
        )
        .unwrap();
        assert_eq!(
            table,
            JointDistribution::bsc_pair(0.1)
                .unwrap()
                .relabel(&["A", "B"])
        );

        let preset: JointDistribution =
            serde_json::from_str(r#"{"preset":"bsc_pair","p":0.1}"#).unwrap();
        assert_eq!(preset, JointDistribution::bsc_pair(0.1).unwrap());
        let u: JointDistribution =
            serde_json::from_str(r#"{"preset":"uniform_independent","m":3}"#).unwrap();
        assert_abs_diff_eq!(
            entropy(&u, &["X1", "X2", "X3"]).unwrap(),
            3.0,
            epsilon = 1e-12
        );
        assert!(
            serde_json::from_str::<JointDistribution>(r#"{"preset":"bsc_pair","p":1.5}"#).is_err()
        );
    }

    #[test]
    fn outcome_table_matches_dense() {
        let bsc = JointDistribution::bsc_triple(0.2).unwrap();
        let mut sparse = OutcomeTable::new(vec!["X".into(), "Y".into(), "Z".into()]);
        for (t, p) in bsc.cells() {
            sparse
                .add(t.iter().map(|&v| v as u32).collect(), p)
                .unwrap();
        }
        sparse.check_normalized().unwrap();
        for subset in [&["X"][..], &["Y", "Z"], &["X", "Y", "Z"]] {
            assert_abs_diff_eq!(
                entropy(&sparse, subset).unwrap(),
                entropy(&bsc, subset).unwrap(),
                epsilon = 1e-12
            );
        }
        assert!(sparse.add(vec![0], 0.0).is_err());
    }

    impl JointDistribution {
        fn relabel(mut self, names: &[&str]) -> Self {
            for (v, n) in self.variables.iter_mut().zip(names) {
                v.name = n.to_string();
            }
            self
        }
    }

    fn random_table() -> impl Strategy<Value = JointDistribution> {
        (prop::collection::vec(1usize..=3, 1..=4)).prop_flat_map(|sizes| {
            let cells: usize = sizes.iter().product();
            (Just(sizes), prop::collection::vec(0.0f64..1.0, cells)).prop_map(|(sizes, raw)| {
                let total: f64 = raw.iter().sum::<f64>() + 1e-9;
                let mut probs: Vec<f64> = raw
                    .iter()
                    .map(|v| (v + 1e-9 / raw.len() as f64) / total)
                    .collect();
                let s = stable_sum(probs.iter().copied());
                for p in &mut probs {
                    *p /= s;
                }
                let vars = sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| Variable::new(format!("V{i}"), k))
                    .collect();
                JointDistribution::new(vars, probs).unwrap()
            })
        })
    }

    fn random_pair() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(0.0f64..1.0).prop_filter_map("zero mass", |raw| {
            let total: f64 = raw.iter().sum();
            (total > 1e-6).then(|| raw.map(|v| v / total))
        })
    }

    proptest! {
        #[test]
        fn chain_rule(dist in random_table(), split in 0usize..4) {
            let labels: Vec<String> = dist.variables().iter().map(|v| v.name.clone()).collect();
            let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
            let k = split.min(labels.len() - 1);
            let (a, b) = labels.split_at(k);
            let h_all = entropy(&dist, &labels).unwrap();
            let h_a = if a.is_empty() { 0.0 } else { entropy(&dist, a).unwrap() };
            let h_b_given_a = conditional_entropy(&dist, b, a).unwrap();
            prop_assert!((h_all - (h_a + h_b_given_a)).abs() < 1e-10);
            prop_assert!(h_b_given_a > -1e-12);
        }

        #[test]
        fn conditioning_reduces_entropy(dist in random_table()) {
            let labels: Vec<String> = dist.variables().iter().map(|v| v.name.clone()).collect();
            let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
            if labels.len() >= 3 {
                let t = &labels[..1];
                let g1 = &labels[1..2];
                let g12 = &labels[1..];
                let wide = conditional_entropy(&dist, t, g12).unwrap();
                let narrow = conditional_entropy(&dist, t, g1).unwrap();
                prop_assert!(wide <= narrow + 1e-10);
            }
        }

        #[test]
        fn uniform_entropy_is_log_size(sizes in prop::collection::vec(1usize..=5, 1..=5)) {
            let vars: Vec<Variable> = sizes.iter().enumerate().map(|(i, &k)| Variable::new(format!("U{i}"), k)).collect();
            let u = JointDistribution::uniform(vars).unwrap();
            let labels: Vec<String> = u.variables().iter().map(|v| v.name.clone()).collect();
            let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
            let expected: f64 = sizes.iter().map(|&k| (k as f64).log2()).sum();
            prop_assert!((entropy(&u, &labels).unwrap() - expected).abs() < 1e-10);
        }

        #[test]
        fn positive_gap_implies_marginals_dominate_xor(m in random_pair()) {
            let d = pair_diagnostics_from_masses(m).unwrap();
            prop_assert!((d.gap > 0.0) == (d.conditional_margin > 0.0) || d.gap.abs() < 1e-12);
            if d.gap > 1e-12 {
                prop_assert!(d.marginals_dominate_xor());
            }
        }
    }
}
