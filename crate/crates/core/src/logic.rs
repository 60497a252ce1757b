//! Real-valued propositional layer: trainable soft-AND connectives, the
//! Łukasiewicz implication, and rule formulas of the shape
//! `(l_1 AND ... AND l_{D-1}) IMPLIES l_D` evaluated over chains of state
//! fragments. Saturated connectives recover classical Boolean semantics.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum LogicError {
    #[error("fragment dimension {got} does not match connective arity {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("literal coordinate {0} out of bounds")]
    BadCoordinate(usize),
    #[error("chain of {chain} fragments cannot host {literals} literals")]
    ChainShape { chain: usize, literals: usize },
    #[error("formula needs at least two literals")]
    TooFewLiterals,
    #[error("connective stack sized for {expected} fragments, got {got}")]
    StackShape { expected: usize, got: usize },
}

/// Soft conjunction of two fragments:
/// `logistic(beta - w_l . (1 - a) - w_r . (1 - b))`.
/// Nonnegative weights keep it monotone in both arguments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Connective<T> {
    pub beta: T,
    pub w_left: Vec<T>,
    pub w_right: Vec<T>,
}

impl<T: Scalar> Connective<T> {
    /// Standard initialization: unit bias, unit weights.
    pub fn unit(dim: usize) -> Self {
        Connective {
            beta: T::one(),
            w_left: vec![T::one(); dim],
            w_right: vec![T::one(); dim],
        }
    }

    /// Weights large enough that outputs are Boolean within 1e-6.
    pub fn saturated(dim: usize) -> Self {
        Connective {
            beta: T::real(20.0),
            w_left: vec![T::real(40.0); dim],
            w_right: vec![T::real(40.0); dim],
        }
    }

    pub fn conjoin(&self, a: &[T], b: &[T]) -> Result<T, LogicError> {
        if a.len() != self.w_left.len() {
            return Err(LogicError::DimensionMismatch {
                expected: self.w_left.len(),
                got: a.len(),
            });
        }
        if b.len() != self.w_right.len() {
            return Err(LogicError::DimensionMismatch {
                expected: self.w_right.len(),
                got: b.len(),
            });
        }
        let mut arg = self.beta;
        for (w, &v) in self.w_left.iter().zip(a) {
            arg -= *w * (T::one() - v);
        }
        for (w, &v) in self.w_right.iter().zip(b) {
            arg -= *w * (T::one() - v);
        }
        Ok(logistic(arg))
    }

    fn clamp_weights(&mut self) {
        for w in self.w_left.iter_mut().chain(self.w_right.iter_mut()) {
            if *w < T::zero() {
                *w = T::zero();
            }
        }
    }
}

pub fn logistic<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Łukasiewicz implication, exact on Boolean inputs.
pub fn implies<T: Scalar>(a: T, b: T) -> T {
    (T::one() - a + b).min(T::one())
}

/// Truth-degree feature: a fragment coordinate, optionally negated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Literal {
    pub coord: usize,
    #[serde(default)]
    pub negated: bool,
}

impl Literal {
    pub fn eval<T: Scalar>(&self, fragment: &[T]) -> Result<T, LogicError> {
        let v = *fragment
            .get(self.coord)
            .ok_or(LogicError::BadCoordinate(self.coord))?;
        Ok(if self.negated { T::one() - v } else { v })
    }
}

/// Rule formula `(l_1 AND ... AND l_{D-1}) IMPLIES l_D` over `D` literals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Formula {
    pub literals: Vec<Literal>,
}

impl Formula {
    pub fn new(literals: Vec<Literal>) -> Result<Self, LogicError> {
        if literals.len() < 2 {
            return Err(LogicError::TooFewLiterals);
        }
        Ok(Formula { literals })
    }

    pub fn arity(&self) -> usize {
        self.literals.len()
    }
}

/// Connectives for one formula: `pair[j]` combines fragments `j` and `j+1`;
/// `fold[k]` conjoins accumulated antecedent truth with the next literal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectiveStack<T> {
    pub pair: Vec<Connective<T>>,
    pub fold: Vec<Connective<T>>,
}

impl<T: Scalar> ConnectiveStack<T> {
    /// Stack shaped for `n_fragments` fragments of dimension `dim`,
    /// supporting a formula with `n_fragments - 1` literals.
    pub fn unit(n_fragments: usize, dim: usize) -> Self {
        let d = n_fragments - 1;
        ConnectiveStack {
            pair: (0..d).map(|_| Connective::unit(dim)).collect(),
            fold: (0..d.saturating_sub(2)).map(|_| Connective::unit(1)).collect(),
        }
    }

    pub fn saturated(n_fragments: usize, dim: usize) -> Self {
        let d = n_fragments - 1;
        ConnectiveStack {
            pair: (0..d).map(|_| Connective::saturated(dim)).collect(),
            fold: (0..d.saturating_sub(2)).map(|_| Connective::saturated(1)).collect(),
        }
    }

    fn params(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for c in self.pair.iter_mut().chain(self.fold.iter_mut()) {
            out.push(&mut c.beta);
            out.extend(c.w_left.iter_mut());
            out.extend(c.w_right.iter_mut());
        }
        out
    }

    fn clamp_weights(&mut self) {
        for c in self.pair.iter_mut().chain(self.fold.iter_mut()) {
            c.clamp_weights();
        }
    }
}

/// A sequence of state fragments, each a vector of truth degrees in [0, 1].
pub type FragmentChain<T> = Vec<Vec<T>>;

/// Combines consecutive fragments with the pair connectives and reads each
/// literal off its combined value.
pub fn literal_values<T: Scalar>(
    formula: &Formula,
    chain: &FragmentChain<T>,
    stack: &ConnectiveStack<T>,
) -> Result<Vec<T>, LogicError> {
    let d = formula.arity();
    if chain.len() != d + 1 {
        return Err(LogicError::ChainShape { chain: chain.len(), literals: d });
    }
    if stack.pair.len() != d {
        return Err(LogicError::StackShape { expected: d, got: stack.pair.len() });
    }
    let mut values = Vec::with_capacity(d);
    for j in 0..d {
        let combined = stack.pair[j].conjoin(&chain[j], &chain[j + 1])?;
        values.push(formula.literals[j].eval(&[combined])?);
    }
    Ok(values)
}

/// Folds literal truth values through the formula structure: antecedent
/// conjunction via the fold connectives, then the Łukasiewicz implication.
pub fn eval_from_literal_values<T: Scalar>(
    values: &[T],
    stack: &ConnectiveStack<T>,
) -> Result<T, LogicError> {
    let d = values.len();
    if d < 2 {
        return Err(LogicError::TooFewLiterals);
    }
    if stack.fold.len() + 2 < d {
        return Err(LogicError::StackShape { expected: d - 2, got: stack.fold.len() });
    }
    let mut antecedent = values[0];
    for k in 0..d - 2 {
        antecedent = stack.fold[k].conjoin(&[antecedent], &[values[k + 1]])?;
    }
    Ok(implies(antecedent, values[d - 1]))
}

/// Full evaluation of a formula over a fragment chain.
pub fn evaluate_formula<T: Scalar>(
    formula: &Formula,
    chain: &FragmentChain<T>,
    stack: &ConnectiveStack<T>,
) -> Result<T, LogicError> {
    let values = literal_values(formula, chain, stack)?;
    eval_from_literal_values(&values, stack)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub learning_rate: T,
    /// Step used by the built-in finite-difference gradient check.
    pub fd_step: T,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig { epochs: 200, learning_rate: T::real(0.5), fd_step: T::real(1e-5) }
    }
}

/// Mean squared error of the formula over a labelled dataset.
pub fn dataset_loss<T: Scalar>(
    formula: &Formula,
    stack: &ConnectiveStack<T>,
    data: &[(FragmentChain<T>, T)],
) -> Result<T, LogicError> {
    let mut total = T::zero();
    for (chain, target) in data {
        let v = evaluate_formula(formula, chain, stack)?;
        total += (v - *target) * (v - *target);
    }
    Ok(total / T::real(data.len().max(1) as f64))
}

/// Central-difference gradient of the dataset loss with respect to every
/// connective parameter, in the order `params()` exposes them.
pub fn numeric_gradient<T: Scalar>(
    formula: &Formula,
    stack: &ConnectiveStack<T>,
    data: &[(FragmentChain<T>, T)],
    h: T,
) -> Result<Vec<T>, LogicError> {
    let mut work = stack.clone();
    let n = work.params().len();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = *work.params()[i];
        *work.params()[i] = orig + h;
        let up = dataset_loss(formula, &work, data)?;
        *work.params()[i] = orig - h;
        let down = dataset_loss(formula, &work, data)?;
        *work.params()[i] = orig;
        grad.push((up - down) / (T::real(2.0) * h));
    }
    Ok(grad)
}

/// Analytic gradient via backpropagation through the fold/implies/logistic
/// graph; matches [`numeric_gradient`] to 1e-4 relative error.
pub fn analytic_gradient<T: Scalar>(
    formula: &Formula,
    stack: &ConnectiveStack<T>,
    data: &[(FragmentChain<T>, T)],
) -> Result<Vec<T>, LogicError> {
    let d = formula.arity();
    let n_pair_params: usize =
        stack.pair.iter().map(|c| 1 + c.w_left.len() + c.w_right.len()).sum();
    let n_fold_params: usize =
        stack.fold.iter().map(|c| 1 + c.w_left.len() + c.w_right.len()).sum();
    let mut grad = vec![T::zero(); n_pair_params + n_fold_params];
    let scale = T::real(1.0 / data.len().max(1) as f64);

    for (chain, target) in data {
        // Forward pass, keeping every intermediate.
        let mut combined = Vec::with_capacity(d);
        for j in 0..d {
            combined.push(stack.pair[j].conjoin(&chain[j], &chain[j + 1])?);
        }
        let values: Vec<T> = formula
            .literals
            .iter()
            .zip(&combined)
            .map(|(l, &c)| l.eval(&[c]))
            .collect::<Result<_, _>>()?;
        let mut ante = Vec::with_capacity(d.max(1) - 1);
        ante.push(values[0]);
        for k in 0..d - 2 {
            let a = *ante.last().unwrap();
            ante.push(stack.fold[k].conjoin(&[a], &[values[k + 1]])?);
        }
        let a_final = *ante.last().unwrap();
        let out = implies(a_final, values[d - 1]);
        let d_out = T::real(2.0) * (out - *target) * scale;

        // d implies / d(a, b): -1 and +1 inside the unsaturated branch.
        let inner = T::one() - a_final + values[d - 1];
        let (mut d_ante, d_vd) = if inner < T::one() {
            (-d_out, d_out)
        } else {
            (T::zero(), T::zero())
        };
        let mut d_values = vec![T::zero(); d];
        d_values[d - 1] = d_vd;

        // Walk the antecedent fold backwards.
        let mut fold_at = n_pair_params;
        let fold_param_sizes: Vec<usize> =
            stack.fold.iter().map(|c| 1 + c.w_left.len() + c.w_right.len()).collect();
        for k in (0..d - 2).rev() {
            let conn = &stack.fold[k];
            let a = ante[k];
            let b = values[k + 1];
            let y = ante[k + 1];
            let dy = y * (T::one() - y); // logistic'
            let base: usize = fold_at + fold_param_sizes[..k].iter().sum::<usize>();
            grad[base] += d_ante * dy; // beta
            grad[base + 1] += d_ante * dy * (a - T::one()); // w_left (dim 1)
            grad[base + 2] += d_ante * dy * (b - T::one()); // w_right (dim 1)
            let da = d_ante * dy * conn.w_left[0];
            let db = d_ante * dy * conn.w_right[0];
            d_values[k + 1] += db;
            d_ante = da;
        }
        d_values[0] += d_ante;
        fold_at = 0; // silence unused when d == 2
        let _ = fold_at;

        // Literal back through pair connectives.
        let mut base = 0;
        for j in 0..d {
            let conn = &stack.pair[j];
            let sign = if formula.literals[j].negated { -T::one() } else { T::one() };
            let dc = d_values[j] * sign;
            let y = combined[j];
            let dy = y * (T::one() - y);
            grad[base] += dc * dy; // beta
            for (k, &v) in chain[j].iter().enumerate() {
                grad[base + 1 + k] += dc * dy * (v - T::one());
            }
            for (k, &v) in chain[j + 1].iter().enumerate() {
                grad[base + 1 + conn.w_left.len() + k] += dc * dy * (v - T::one());
            }
            base += 1 + conn.w_left.len() + conn.w_right.len();
        }
    }
    Ok(grad)
}

/// Gradient descent on squared error; weights are clamped nonnegative after
/// every step. Zero epochs returns the initialization untouched.
pub fn train_connectives<T: Scalar>(
    formula: &Formula,
    init: ConnectiveStack<T>,
    data: &[(FragmentChain<T>, T)],
    cfg: &TrainConfig<T>,
    seed: u64,
) -> Result<ConnectiveStack<T>, LogicError> {
    let mut stack = init;
    let mut rng = seeds::rng(seed, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        // Shuffled full-batch passes keep the path seed-deterministic.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let grad = analytic_gradient(formula, &stack, data)?;
        let lr = cfg.learning_rate;
        for (p, g) in stack.params().into_iter().zip(&grad) {
            *p -= lr * *g;
        }
        stack.clamp_weights();
    }
    Ok(stack)
}
