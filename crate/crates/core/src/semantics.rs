//! Entailment semantics over a context's weighted DAG.
//!
//! Each state `x` is represented by the function `h^x(y)` = total path mass
//! from `x` to `y` (1 at `x` itself), the copresheaf the rest of the crate
//! measures against. Information values are KL-style sums between that
//! representation and a prior over states; similarity and distance compare
//! two representations through their overlapping support mass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::world::{topological_order, ContextId, Edge, StateId, World, WorldError};

#[derive(Debug, Error, PartialEq)]
pub enum SemanticsError {
    #[error("state {0} is not part of this context")]
    UnknownState(usize),
    #[error("cycle in entailment edges")]
    Cyclic,
    #[error("prior not positive on support state {0}")]
    NonPositivePrior(usize),
    #[error("prior values sum to {0}, expected 1")]
    PriorSum(f64),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// How KL-style sums treat individually negative terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfoMode {
    /// Sum the terms as they come (may go negative).
    #[default]
    Raw,
    /// Clamp each term at zero before summing.
    FlooredTerms,
}

/// Path-mass index of one context: `reach(x, y)` sums edge-weight products
/// over every directed path from `x` to `y`, clamped into [0, 1].
#[derive(Clone, Debug)]
pub struct CopresheafIndex<T> {
    context: ContextId,
    members: Vec<StateId>,
    pos: BTreeMap<StateId, usize>,
    clamped: Matrix<T>,
    raw: Matrix<T>,
}

impl<T: Scalar> CopresheafIndex<T> {
    /// Builds the index from a raw member/edge list (must be acyclic).
    pub fn from_edges(
        context: ContextId,
        members: Vec<StateId>,
        edges: &[Edge<T>],
    ) -> Result<Self, SemanticsError> {
        let order = topological_order(&members, edges).ok_or(SemanticsError::Cyclic)?;
        let pos: BTreeMap<StateId, usize> =
            members.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        for e in edges {
            if !pos.contains_key(&e.0) {
                return Err(SemanticsError::UnknownState(e.0 .0));
            }
            if !pos.contains_key(&e.1) {
                return Err(SemanticsError::UnknownState(e.1 .0));
            }
        }
        let n = members.len();
        let mut out: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        for e in edges {
            out[pos[&e.0]].push((pos[&e.1], e.2));
        }
        let order_pos: Vec<usize> = order.iter().map(|s| pos[s]).collect();
        let mut raw = Matrix::zeros(n, n);
        for x in 0..n {
            raw.set(x, x, T::one());
            // Propagate mass forward in topological order; every path from x
            // to y contributes the product of its edge weights exactly once.
            for &u in &order_pos {
                let m = raw.get(x, u);
                if m > T::zero() {
                    for &(v, w) in &out[u] {
                        let acc = raw.get(x, v) + m * w;
                        raw.set(x, v, acc);
                    }
                }
            }
        }
        let mut clamped = raw.clone();
        for x in 0..n {
            for y in 0..n {
                let v = clamped.get(x, y);
                clamped.set(x, y, v.min(T::one()));
            }
        }
        Ok(CopresheafIndex { context, members, pos, clamped, raw })
    }

    pub fn context(&self) -> ContextId {
        self.context
    }

    pub fn members(&self) -> &[StateId] {
        &self.members
    }

    pub fn position(&self, s: StateId) -> Result<usize, SemanticsError> {
        self.pos.get(&s).copied().ok_or(SemanticsError::UnknownState(s.0))
    }

    /// Clamped path mass from `x` to `y`.
    pub fn reach(&self, x: StateId, y: StateId) -> Result<T, SemanticsError> {
        Ok(self.clamped.get(self.position(x)?, self.position(y)?))
    }

    /// Unclamped path mass, used by monotonicity checks.
    pub fn raw_reach(&self, x: StateId, y: StateId) -> Result<T, SemanticsError> {
        Ok(self.raw.get(self.position(x)?, self.position(y)?))
    }

    fn reach_at(&self, x: usize, y: usize) -> T {
        self.clamped.get(x, y)
    }

    /// Support of `h^x`: every state with positive path mass, `x` included.
    pub fn support(&self, x: StateId) -> Result<Vec<StateId>, SemanticsError> {
        let xi = self.position(x)?;
        Ok((0..self.members.len())
            .filter(|&y| self.reach_at(xi, y) > T::zero())
            .map(|y| self.members[y])
            .collect())
    }

    /// Support without the state itself; two distinct states can agree here
    /// even though the full supports always differ on an acyclic graph.
    pub fn proper_support(&self, x: StateId) -> Result<Vec<StateId>, SemanticsError> {
        Ok(self.support(x)?.into_iter().filter(|&y| y != x).collect())
    }

    /// Hom value between the representations of `x` and `y`: total mass `h^x`
    /// puts on the support of `h^y`.
    pub fn hom_value(&self, x: StateId, y: StateId) -> Result<T, SemanticsError> {
        let xi = self.position(x)?;
        let yi = self.position(y)?;
        let n = self.members.len();
        Ok((0..n)
            .filter(|&d| self.reach_at(yi, d) > T::zero())
            .map(|d| self.reach_at(xi, d))
            .sum())
    }

    /// Functoriality of the representation map: whenever `x` entails `y`, the
    /// entailment weight is dominated by the hom value between the images.
    pub fn is_enriched_functor(&self, tol: T) -> bool {
        let n = self.members.len();
        for x in 0..n {
            for y in 0..n {
                let r = self.reach_at(x, y);
                if r > T::zero() {
                    let hom = self
                        .hom_value(self.members[x], self.members[y])
                        .expect("members are indexed");
                    if r > hom + tol {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Total path mass of the support of `x` (at least 1: the state itself).
    pub fn total_mass(&self, x: StateId) -> Result<T, SemanticsError> {
        let xi = self.position(x)?;
        Ok((0..self.members.len()).map(|y| self.reach_at(xi, y)).sum())
    }
}

/// Builds the index for one context of a validated world.
pub fn build_copresheaf_index<T: Scalar>(
    world: &World<T>,
    context: ContextId,
) -> Result<CopresheafIndex<T>, SemanticsError> {
    let ctx = world.context(context)?;
    CopresheafIndex::from_edges(context, ctx.valid_states.clone(), &ctx.edges)
}

/// Reference distribution over a context's states; positive everywhere so
/// every logarithm below is finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior<T> {
    pub context: ContextId,
    pub members: Vec<StateId>,
    pub values: Vec<T>,
}

impl<T: Scalar> Prior<T> {
    /// Default prior: each state weighted by the total reach mass arriving at
    /// it under the context's state prior, normalized.
    pub fn incoming_mass(
        world: &World<T>,
        idx: &CopresheafIndex<T>,
    ) -> Result<Self, SemanticsError> {
        let ctx = world.context(idx.context())?;
        let n = idx.members().len();
        let mut mass = vec![T::zero(); n];
        for (xi, _) in idx.members().iter().enumerate() {
            let px = ctx.state_prior[xi];
            for (y, m) in mass.iter_mut().enumerate() {
                *m += px * idx.reach_at(xi, y);
            }
        }
        let total: T = mass.iter().copied().sum();
        let values: Vec<T> = mass.into_iter().map(|m| m / total).collect();
        let prior = Prior {
            context: idx.context(),
            members: idx.members().to_vec(),
            values,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn from_values(
        context: ContextId,
        members: Vec<StateId>,
        values: Vec<T>,
    ) -> Result<Self, SemanticsError> {
        let p = Prior { context, members, values };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), SemanticsError> {
        for (i, &v) in self.values.iter().enumerate() {
            if v <= T::zero() {
                return Err(SemanticsError::NonPositivePrior(self.members[i].0));
            }
        }
        let sum: T = self.values.iter().copied().sum();
        if (sum.to_f64_lossy() - 1.0).abs() > 1e-9 {
            return Err(SemanticsError::PriorSum(sum.to_f64_lossy()));
        }
        Ok(())
    }

    pub fn value(&self, s: StateId) -> Result<T, SemanticsError> {
        self.members
            .iter()
            .position(|&m| m == s)
            .map(|i| self.values[i])
            .ok_or(SemanticsError::UnknownState(s.0))
    }
}

/// Information carried by observing `x`: mass-weighted log ratios between the
/// entailment weights of `x` and the prior, in nats.
pub fn semantic_information<T: Scalar>(
    x: StateId,
    idx: &CopresheafIndex<T>,
    prior: &Prior<T>,
    mode: InfoMode,
) -> Result<T, SemanticsError> {
    let xi = idx.position(x)?;
    let mut total = T::zero();
    for (y, &sy) in idx.members().iter().enumerate() {
        let r = idx.reach_at(xi, y);
        if r > T::zero() {
            let term = r * (r / prior.value(sy)?).ln();
            total += match mode {
                InfoMode::Raw => term,
                InfoMode::FlooredTerms => term.max(T::zero()),
            };
        }
    }
    Ok(total)
}

/// Information left in `x` once every state already entailed by the history
/// is removed from its support; the remaining mass is renormalized. Exactly
/// zero when the history covers everything `x` entails (in particular when
/// `x` itself appears in the history).
pub fn conditioned_semantic_information<T: Scalar>(
    x: StateId,
    history: &[StateId],
    idx: &CopresheafIndex<T>,
    prior: &Prior<T>,
    mode: InfoMode,
) -> Result<T, SemanticsError> {
    if history.is_empty() {
        return semantic_information(x, idx, prior, mode);
    }
    let xi = idx.position(x)?;
    let n = idx.members().len();
    let mut covered = vec![false; n];
    for &h in history {
        let hi = idx.position(h)?;
        for (y, c) in covered.iter_mut().enumerate() {
            if idx.reach_at(hi, y) > T::zero() {
                *c = true;
            }
        }
    }
    let fresh: Vec<usize> = (0..n)
        .filter(|&y| !covered[y] && idx.reach_at(xi, y) > T::zero())
        .collect();
    if fresh.is_empty() {
        return Ok(T::zero());
    }
    let total: T = fresh.iter().map(|&y| idx.reach_at(xi, y)).sum();
    let mut value = T::zero();
    for &y in &fresh {
        let w = idx.reach_at(xi, y) / total;
        let term = w * (w / prior.value(idx.members()[y])?).ln();
        value += match mode {
            InfoMode::Raw => term,
            InfoMode::FlooredTerms => term.max(T::zero()),
        };
    }
    Ok(value)
}

/// Geometric-mean overlap of two representations: 1 exactly when the supports
/// coincide, 0 exactly when they are disjoint, symmetric by construction.
pub fn similarity<T: Scalar>(
    x: StateId,
    y: StateId,
    idx: &CopresheafIndex<T>,
) -> Result<T, SemanticsError> {
    let xi = idx.position(x)?;
    let yi = idx.position(y)?;
    let n = idx.members().len();
    let mut in_x = T::zero();
    let mut in_y = T::zero();
    let mut overlap_x = T::zero();
    let mut overlap_y = T::zero();
    for d in 0..n {
        let rx = idx.reach_at(xi, d);
        let ry = idx.reach_at(yi, d);
        in_x += rx;
        in_y += ry;
        if rx > T::zero() && ry > T::zero() {
            overlap_x += rx;
            overlap_y += ry;
        }
    }
    Ok(((overlap_x / in_x) * (overlap_y / in_y)).sqrt())
}

/// Per-state entailment mass used by [`semantic_distance`]: the Bregman form
/// `r ln(r/p) - r + p`, nonnegative and zero only at `r == p`, so the
/// distance vanishes exactly when nothing of `z`'s support is left uncovered.
pub fn entailment_mass<T: Scalar>(
    z: StateId,
    y: StateId,
    idx: &CopresheafIndex<T>,
    prior: &Prior<T>,
) -> Result<T, SemanticsError> {
    let r = idx.reach(z, y)?;
    if r <= T::zero() {
        return Ok(T::zero());
    }
    let p = prior.value(y)?;
    Ok((r * (r / p).ln() - r + p).max(T::zero()))
}

/// Asymmetric semantic distance: total entailment mass of the part of `z`'s
/// support that `z_hat`'s support fails to cover.
pub fn semantic_distance<T: Scalar>(
    z: StateId,
    z_hat: StateId,
    idx: &CopresheafIndex<T>,
    prior: &Prior<T>,
) -> Result<T, SemanticsError> {
    let zi = idx.position(z)?;
    let hi = idx.position(z_hat)?;
    let mut d = T::zero();
    for (y, &sy) in idx.members().iter().enumerate() {
        if idx.reach_at(zi, y) > T::zero() && idx.reach_at(hi, y) <= T::zero() {
            d += entailment_mass(z, sy, idx, prior)?;
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Context;

    fn ctx_world(edges: Vec<Edge<f64>>, n: usize) -> World<f64> {
        let states: Vec<StateId> = (0..n).map(StateId).collect();
        let prior = vec![1.0 / n as f64; n];
        World::new(
            states.clone(),
            vec![Context {
                id: ContextId(0),
                prior: 1.0,
                valid_states: states,
                edges,
                state_prior: prior,
            }],
        )
        .unwrap()
    }

    fn index(world: &World<f64>) -> CopresheafIndex<f64> {
        build_copresheaf_index(world, ContextId(0)).unwrap()
    }

    #[test]
    fn chain_reach_multiplies_weights() {
        let w = ctx_world(
            vec![
                Edge(StateId(0), StateId(1), 0.5),
                Edge(StateId(1), StateId(2), 0.4),
            ],
            3,
        );
        let idx = index(&w);
        assert!((idx.reach(StateId(0), StateId(2)).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(idx.reach(StateId(0), StateId(0)).unwrap(), 1.0);
        assert_eq!(idx.reach(StateId(2), StateId(0)).unwrap(), 0.0);
    }

    #[test]
    fn parallel_paths_add() {
        let w = ctx_world(
            vec![
                Edge(StateId(0), StateId(1), 0.5),
                Edge(StateId(1), StateId(2), 0.4),
                Edge(StateId(0), StateId(2), 0.3),
            ],
            3,
        );
        let idx = index(&w);
        assert!((idx.reach(StateId(0), StateId(2)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn path_mass_clamps_at_one() {
        // Built directly: a validated world could not carry this much mass.
        let members = vec![StateId(0), StateId(1), StateId(2)];
        let edges = vec![
            Edge(StateId(0), StateId(1), 1.0),
            Edge(StateId(1), StateId(2), 1.0),
            Edge(StateId(0), StateId(2), 0.9),
        ];
        let idx = CopresheafIndex::from_edges(ContextId(0), members, &edges).unwrap();
        assert!((idx.raw_reach(StateId(0), StateId(2)).unwrap() - 1.9f64).abs() < 1e-15);
        assert_eq!(idx.reach(StateId(0), StateId(2)).unwrap(), 1.0);
    }

    #[test]
    fn cyclic_edges_are_rejected() {
        let members = vec![StateId(0), StateId(1)];
        let edges = vec![
            Edge(StateId(0), StateId(1), 0.5),
            Edge(StateId(1), StateId(0), 0.5),
        ];
        let err = CopresheafIndex::from_edges(ContextId(0), members, &edges).unwrap_err();
        assert_eq!(err, SemanticsError::Cyclic);
    }

    #[test]
    fn isolated_state_info_is_log_prior_ratio() {
        // Two isolated states under the uniform default prior: S = ln 2.
        let w = ctx_world(vec![], 2);
        let idx = index(&w);
        let prior = Prior::incoming_mass(&w, &idx).unwrap();
        let s = semantic_information(StateId(0), &idx, &prior, InfoMode::Raw).unwrap();
        assert!((s - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn default_prior_is_normalized_incoming_mass() {
        let w = ctx_world(vec![Edge(StateId(0), StateId(1), 0.5)], 2);
        let idx = index(&w);
        let prior = Prior::incoming_mass(&w, &idx).unwrap();
        // mass(0) = 0.5, mass(1) = 0.5*0.5 + 0.5 = 0.75, total 1.25.
        assert!((prior.value(StateId(0)).unwrap() - 0.4).abs() < 1e-12);
        assert!((prior.value(StateId(1)).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn conditioning_on_covering_history_zeroes_information() {
        let w = ctx_world(vec![Edge(StateId(0), StateId(1), 0.5)], 2);
        let idx = index(&w);
        let prior = Prior::incoming_mass(&w, &idx).unwrap();
        let val = conditioned_semantic_information(
            StateId(1),
            &[StateId(0)],
            &idx,
            &prior,
            InfoMode::Raw,
        )
        .unwrap();
        assert_eq!(val, 0.0);
        let self_hist = conditioned_semantic_information(
            StateId(0),
            &[StateId(0)],
            &idx,
            &prior,
            InfoMode::Raw,
        )
        .unwrap();
        assert_eq!(self_hist, 0.0);
    }

    #[test]
    fn conditioning_keeps_fresh_mass() {
        // 0 -> 2 (0.5), 1 -> 2 (0.8); after history {0}, state 1 only keeps
        // itself: value = ln(1 / prior(1)) with prior(1) = 1/4.3.
        let w = ctx_world(
            vec![
                Edge(StateId(0), StateId(2), 0.5),
                Edge(StateId(1), StateId(2), 0.8),
            ],
            3,
        );
        let idx = index(&w);
        let prior = Prior::incoming_mass(&w, &idx).unwrap();
        let val = conditioned_semantic_information(
            StateId(1),
            &[StateId(0)],
            &idx,
            &prior,
            InfoMode::Raw,
        )
        .unwrap();
        assert!((val - 4.3f64.ln()).abs() < 1e-12);
        let empty = conditioned_semantic_information(
            StateId(1),
            &[],
            &idx,
            &prior,
            InfoMode::Raw,
        )
        .unwrap();
        let plain = semantic_information(StateId(1), &idx, &prior, InfoMode::Raw).unwrap();
        assert_eq!(empty, plain);
    }

    #[test]
    fn similarity_partial_overlap_is_one_third() {
        let w = ctx_world(
            vec![
                Edge(StateId(0), StateId(2), 0.5),
                Edge(StateId(1), StateId(2), 0.5),
            ],
            3,
        );
        let idx = index(&w);
        let z = similarity(StateId(0), StateId(1), &idx).unwrap();
        assert!((z - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(similarity(StateId(0), StateId(0), &idx).unwrap(), 1.0);
    }

    #[test]
    fn similarity_disjoint_is_zero() {
        let w = ctx_world(vec![], 2);
        let idx = index(&w);
        assert_eq!(similarity(StateId(0), StateId(1), &idx).unwrap(), 0.0);
    }

    #[test]
    fn distance_zero_iff_support_covered() {
        let w = ctx_world(vec![Edge(StateId(0), StateId(1), 0.5)], 2);
        let idx = index(&w);
        let prior = Prior::incoming_mass(&w, &idx).unwrap();
        // Support of 1 is {1}, covered by support of 0: distance 0.
        assert_eq!(
            semantic_distance(StateId(1), StateId(0), &idx, &prior).unwrap(),
            0.0
        );
        // The other direction leaves {0} uncovered.
        let d = semantic_distance(StateId(0), StateId(1), &idx, &prior).unwrap();
        assert!(d > 0.0);
        assert_eq!(
            semantic_distance(StateId(0), StateId(0), &idx, &prior).unwrap(),
            0.0
        );
    }

    #[test]
    fn disjoint_distance_is_total_entailment_mass() {
        // Two isolated states, uniform prior 1/2: mass = 1*ln 2 - 1 + 0.5.
        let w = ctx_world(vec![], 2);
        let idx = index(&w);
        let prior = Prior::incoming_mass(&w, &idx).unwrap();
        let d = semantic_distance(StateId(0), StateId(1), &idx, &prior).unwrap();
        let expect = std::f64::consts::LN_2 - 0.5;
        assert!((d - expect).abs() < 1e-12);
    }

    #[test]
    fn enriched_functor_check_holds_on_chain() {
        let w = ctx_world(
            vec![
                Edge(StateId(0), StateId(1), 0.5),
                Edge(StateId(1), StateId(2), 0.4),
            ],
            3,
        );
        let idx = index(&w);
        assert!(idx.is_enriched_functor(1e-12));
        // reach(0,2) = 0.2 equals the hom value between h^0 and h^2.
        let hom = idx.hom_value(StateId(0), StateId(2)).unwrap();
        assert!((hom - 0.2).abs() < 1e-15);
    }

    #[test]
    fn proper_supports_reveal_synonyms() {
        let w = ctx_world(
            vec![
                Edge(StateId(0), StateId(2), 0.5),
                Edge(StateId(1), StateId(2), 0.5),
            ],
            3,
        );
        let idx = index(&w);
        assert_eq!(idx.proper_support(StateId(0)).unwrap(), vec![StateId(2)]);
        assert_eq!(
            idx.proper_support(StateId(0)).unwrap(),
            idx.proper_support(StateId(1)).unwrap()
        );
        assert_ne!(idx.support(StateId(0)).unwrap(), idx.support(StateId(1)).unwrap());
    }
}
