//! Evaluation metrics for reconstructed state descriptions (distortion,
//! reliability, causal influence) and empirical checks of the coding-length
//! and error-probability bounds. Length and error checks work in bits;
//! divergences elsewhere are in nats.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{huffman_codebook, ChannelError, Codebook};
use crate::logic::{evaluate_formula, ConnectiveStack, Formula, FragmentChain, LogicError};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::seeds;
use crate::semantics::{CopresheafIndex, SemanticsError};
use crate::world::{StateId, World, WorldError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {need} trials, got {got}")]
    TooFewTrials { got: usize, need: usize },
    #[error("need at least {need} pipeline samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("{formulas} formulas but {stacks} connective stacks")]
    FormulaCount { formulas: usize, stacks: usize },
    #[error("context {context} has {states} states but its codebook has {codewords} codewords")]
    BookShape {
        context: usize,
        states: usize,
        codewords: usize,
    },
    #[error("{books} codebooks for {contexts} contexts")]
    BookCount { books: usize, contexts: usize },
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Squared gap between two vectors of formula truth values.
pub fn distortion_from_values<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Sum of squared formula-value differences between a state description
/// and its reconstruction, each formula evaluated with its own connectives.
pub fn semantic_distortion<T: Scalar>(
    z: &FragmentChain<T>,
    z_hat: &FragmentChain<T>,
    formulas: &[Formula],
    stacks: &[ConnectiveStack<T>],
) -> Result<T, MetricsError> {
    if formulas.len() != stacks.len() {
        return Err(MetricsError::FormulaCount {
            formulas: formulas.len(),
            stacks: stacks.len(),
        });
    }
    let mut total = T::zero();
    for (formula, stack) in formulas.iter().zip(stacks) {
        let v = evaluate_formula(formula, z, stack)?;
        let w = evaluate_formula(formula, z_hat, stack)?;
        total += (v - w) * (v - w);
    }
    Ok(total)
}

/// Squared gap between the semantic information of the true and the
/// reconstructed state.
pub fn info_distortion<T: Scalar>(s: T, s_hat: T) -> T {
    (s - s_hat) * (s - s_hat)
}

/// Divergence (nats) between the action distribution given the true state
/// and the action distribution after coding, channel noise, and decoding:
/// the decoded side is the channel-weighted mixture of the per-decoded-state
/// action rows. Zero-mass decoded entries are lifted to a 1e-12 floor; an
/// infinite return marks true-side mass that the floor could not cover.
pub fn causal_influence<T: Scalar>(
    action_given_true: &[T],
    channel_row: &[T],
    decoder: impl Fn(usize) -> usize,
    action_given_decoded: &Matrix<T>,
) -> T {
    let n_actions = action_given_true.len();
    let mut mixture = vec![T::zero(); n_actions];
    for (x, &px) in channel_row.iter().enumerate() {
        if px <= T::zero() {
            continue;
        }
        let z_hat = decoder(x);
        for a in 0..n_actions {
            mixture[a] += px * action_given_decoded.get(z_hat, a);
        }
    }
    let floor = T::real(1e-12);
    let mut kl = T::zero();
    for a in 0..n_actions {
        let p = action_given_true[a];
        if p <= T::zero() {
            continue;
        }
        let q = mixture[a].max(floor);
        if q <= T::zero() {
            return T::infinity();
        }
        kl += p * (p / q).ln();
    }
    kl.max(T::zero())
}

/// Effectiveness of communication under causal influence c: 1 / (1 + c).
pub fn effectiveness<T: Scalar>(influence: T) -> T {
    T::one() / (T::one() + influence)
}

/// Monte Carlo estimate of p(distortion < delta) with a 95% normal
/// half-width. The trial closure maps the shared stream to one distortion.
pub fn semantic_reliability<T, F>(
    mut trial: F,
    delta: T,
    n_trials: usize,
    seed: u64,
) -> Result<(T, T), MetricsError>
where
    T: Scalar,
    F: FnMut(&mut ChaCha8Rng) -> T,
{
    if n_trials < 100 {
        return Err(MetricsError::TooFewTrials {
            got: n_trials,
            need: 100,
        });
    }
    let mut rng = seeds::rng(seed, 7);
    let mut hits = 0usize;
    for _ in 0..n_trials {
        if trial(&mut rng) < delta {
            hits += 1;
        }
    }
    let n = T::real(n_trials as f64);
    let p = T::real(hits as f64) / n;
    let half = T::real(1.96) * (p * (T::one() - p) / n).sqrt();
    Ok((p, half))
}

/// Reconstruction quality summary for one operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport<T> {
    pub formula_distortion: T,
    pub info_distortion: T,
    pub reliability_estimate: T,
    pub half_width: T,
    pub delta: T,
    pub epsilon: T,
}

impl<T: Scalar> DistortionReport<T> {
    /// Whether the estimated reliability meets the 1 - epsilon target.
    pub fn meets_target(&self) -> bool {
        self.reliability_estimate >= T::one() - self.epsilon
    }
}

/// One bracketing check: lower <= measured <= upper within 1e-9 slack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport<T> {
    pub lower: T,
    pub measured: T,
    pub upper: T,
    pub satisfied: bool,
}

impl<T: Scalar> BoundsReport<T> {
    pub fn new(lower: T, measured: T, upper: T) -> Self {
        let slack = T::real(1e-9);
        BoundsReport {
            lower,
            measured,
            upper,
            satisfied: lower - slack <= measured && measured <= upper + slack,
        }
    }
}

/// One codebook per context. The same short bitstrings recur across
/// contexts; the listener infers the context and decodes with that
/// context's book, so each bitstring still has a single well-defined
/// length and the codeword marginal sums state mass across contexts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct ContextCodebooks<T> {
    pub books: Vec<Codebook<T>>,
}

/// Huffman codebook per context over that context's state prior. A
/// single-state context gets the empty codeword and transmits nothing.
pub fn per_context_huffman<T: Scalar>(
    world: &World<T>,
) -> Result<ContextCodebooks<T>, MetricsError> {
    let books = world
        .contexts
        .iter()
        .map(|c| huffman_codebook(&c.state_prior))
        .collect::<Result<_, _>>()?;
    Ok(ContextCodebooks { books })
}

/// Ceiling of -log2(p) with dyadic probabilities snapped to their exact
/// integer length first.
fn ceil_neg_log2<T: Scalar>(p: T) -> T {
    let x = -p.ln() / T::real(std::f64::consts::LN_2);
    let nearest = x.round();
    if (x - nearest).abs() < T::real(1e-9) {
        nearest
    } else {
        x.ceil()
    }
}

fn entropy_bits<T: Scalar>(probs: impl Iterator<Item = T>) -> T {
    let mut h = T::zero();
    for p in probs {
        if p > T::zero() {
            h -= p * p.ln();
        }
    }
    h / T::real(std::f64::consts::LN_2)
}

/// Length-bound check outcome; the context-aware bracket plus the
/// context-blind comparators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBoundsReport<T> {
    pub contextual: BoundsReport<T>,
    /// Entropy of the raw state marginal: the floor for a coder that
    /// ignores context.
    pub classical_lower: T,
    /// Worst-context ceiling-log length: the context-blind ceiling.
    pub classical_upper: T,
}

/// Checks the average-codeword-length bracket: the prior-weighted
/// conditional state entropy from below and the prior-weighted ceiling-log
/// expression from above, both in bits. Measured length is the
/// prior-weighted average codeword length under the per-context books;
/// both sides of the bracket hold context by context, so satisfaction is
/// structural rather than statistical.
pub fn check_length_bounds<T: Scalar>(
    world: &World<T>,
    books: &ContextCodebooks<T>,
) -> Result<LengthBoundsReport<T>, MetricsError> {
    if books.books.len() != world.contexts.len() {
        return Err(MetricsError::BookCount {
            books: books.books.len(),
            contexts: world.contexts.len(),
        });
    }
    let mut lower = T::zero();
    let mut measured = T::zero();
    let mut upper = T::zero();
    let mut classical_upper = T::zero();
    for (c, book) in world.contexts.iter().zip(&books.books) {
        if book.len() != c.valid_states.len() {
            return Err(MetricsError::BookShape {
                context: c.id.0,
                states: c.valid_states.len(),
                codewords: book.len(),
            });
        }
        lower += c.prior * entropy_bits(c.state_prior.iter().copied());
        measured += c.prior * book.average_length(&c.state_prior);
        let mut ceil_len = T::zero();
        for &p in &c.state_prior {
            if p > T::zero() {
                ceil_len += p * ceil_neg_log2(p);
            }
        }
        upper += c.prior * ceil_len;
        if ceil_len > classical_upper {
            classical_upper = ceil_len;
        }
    }

    let mut marginal: BTreeMap<usize, T> = BTreeMap::new();
    for c in &world.contexts {
        for (i, &s) in c.valid_states.iter().enumerate() {
            *marginal.entry(s.0).or_insert_with(T::zero) += c.prior * c.state_prior[i];
        }
    }
    let classical_lower = entropy_bits(marginal.values().copied());

    Ok(LengthBoundsReport {
        contextual: BoundsReport::new(lower, measured, upper),
        classical_lower,
        classical_upper,
    })
}

/// Builds per-context Huffman codebooks and runs the length-bound check.
pub fn length_bounds_with_huffman<T: Scalar>(
    world: &World<T>,
) -> Result<LengthBoundsReport<T>, MetricsError> {
    check_length_bounds(world, &per_context_huffman(world)?)
}

/// Error-probability bound check over joint (true, reconstructed) samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundsReport<T> {
    pub n_samples: usize,
    /// Fraction of samples with a reconstruction mismatch.
    pub syntactic_error: T,
    /// Fraction of samples whose entailment sets differ.
    pub semantic_error: T,
    /// Fano-style floor under the syntactic error.
    pub classical_bound: T,
    /// Entailment-aware floor under the semantic error.
    pub semantic_bound: T,
    pub h_zhat_given_z: T,
    pub h_z_given_zhat: T,
    pub h_e_given_zhat: T,
    /// classical_bound >= semantic_bound. Only meaningful under real
    /// channel noise: the classical numerator's -1 slack puts it below
    /// zero on clean streams.
    pub ordering_ok: bool,
    pub classical_ok: bool,
    pub semantic_ok: bool,
    /// Both empirical errors sit above their bounds.
    pub satisfied: bool,
}

/// Entropy (bits) of an empirical distribution with the small-sample
/// bias correction (observed support size - 1) / (2n ln 2).
fn corrected_entropy_bits<T: Scalar, K: Ord>(counts: &BTreeMap<K, usize>, n: usize) -> T {
    let nt = T::real(n as f64);
    let mut h = T::zero();
    for &c in counts.values() {
        if c > 0 {
            let p = T::real(c as f64) / nt;
            h -= p * p.ln();
        }
    }
    let support = counts.values().filter(|&&c| c > 0).count();
    (h + T::real((support.saturating_sub(1)) as f64) / (T::real(2.0) * nt))
        / T::real(std::f64::consts::LN_2)
}

/// Compares empirical reconstruction errors against their entropy floors:
/// the syntactic error against (H(zhat|z) - 1) / log2 |W| and the
/// semantic error against (H(z|zhat) - H(e|zhat)) / log2 |W|, where e is
/// the part of the true state's entailment set the reconstruction fails to
/// cover. The entailment set here is the full one, state included, so e
/// names the true state whenever the reconstruction does not entail it;
/// the semantic error instead compares proper entailment sets, under which
/// synonym confusions are free. Entropies are empirical with bias
/// correction, in bits.
pub fn check_error_bounds<T: Scalar>(
    samples: &[(StateId, StateId)],
    index: &CopresheafIndex<T>,
    n_world_states: usize,
) -> Result<ErrorBoundsReport<T>, MetricsError> {
    let n = samples.len();
    if n < 1000 {
        return Err(MetricsError::TooFewSamples { got: n, need: 1000 });
    }
    let mut full_cache: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut full = |s: StateId| -> Result<Vec<usize>, MetricsError> {
        if let Some(v) = full_cache.get(&s.0) {
            return Ok(v.clone());
        }
        let mut v: Vec<usize> = index.support(s)?.iter().map(|s| s.0).collect();
        v.sort_unstable();
        full_cache.insert(s.0, v.clone());
        Ok(v)
    };
    let mut proper_cache: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut proper = |s: StateId| -> Result<Vec<usize>, MetricsError> {
        if let Some(v) = proper_cache.get(&s.0) {
            return Ok(v.clone());
        }
        let mut v: Vec<usize> = index.proper_support(s)?.iter().map(|s| s.0).collect();
        v.sort_unstable();
        proper_cache.insert(s.0, v.clone());
        Ok(v)
    };

    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut z_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut zhat_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut e_joint: BTreeMap<(Vec<usize>, usize), usize> = BTreeMap::new();
    let mut syntactic = 0usize;
    let mut semantic = 0usize;
    for &(z, z_hat) in samples {
        *joint.entry((z.0, z_hat.0)).or_insert(0) += 1;
        *z_counts.entry(z.0).or_insert(0) += 1;
        *zhat_counts.entry(z_hat.0).or_insert(0) += 1;
        let hz = full(z)?;
        let hzh = full(z_hat)?;
        let uncovered: Vec<usize> = hz.iter().copied().filter(|s| !hzh.contains(s)).collect();
        if z != z_hat {
            syntactic += 1;
        }
        if proper(z)? != proper(z_hat)? {
            semantic += 1;
        }
        *e_joint.entry((uncovered, z_hat.0)).or_insert(0) += 1;
    }

    let h_joint: T = corrected_entropy_bits(&joint, n);
    let h_z: T = corrected_entropy_bits(&z_counts, n);
    let h_zhat: T = corrected_entropy_bits(&zhat_counts, n);
    let h_e_joint: T = corrected_entropy_bits(&e_joint, n);
    let h_zhat_given_z = (h_joint - h_z).max(T::zero());
    let h_z_given_zhat = (h_joint - h_zhat).max(T::zero());
    let h_e_given_zhat = (h_e_joint - h_zhat).max(T::zero());

    let log_w = T::real((n_world_states as f64).log2());
    let classical_bound = (h_zhat_given_z - T::one()) / log_w;
    let semantic_bound = (h_z_given_zhat - h_e_given_zhat) / log_w;

    let nt = T::real(n as f64);
    let syntactic_error = T::real(syntactic as f64) / nt;
    let semantic_error = T::real(semantic as f64) / nt;
    let slack = T::real(1e-9);
    let ordering_ok = classical_bound + slack >= semantic_bound;
    let classical_ok = syntactic_error + slack >= classical_bound;
    let semantic_ok = semantic_error + slack >= semantic_bound;
    Ok(ErrorBoundsReport {
        n_samples: n,
        syntactic_error,
        semantic_error,
        classical_bound,
        semantic_bound,
        h_zhat_given_z,
        h_z_given_zhat,
        h_e_given_zhat,
        ordering_ok,
        classical_ok,
        semantic_ok,
        satisfied: classical_ok && semantic_ok,
    })
}
