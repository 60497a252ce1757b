//! Syntactic state space: a finite set of states plus weighted acyclic
//! entailment edges, grouped into contexts with their own priors.
//!
//! A `World` document serializes to a single JSON object and round-trips
//! bit-exactly, which is what makes seeded experiment re-runs comparable
//! byte for byte.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seeds;

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct StateId(pub usize);

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ContextId(pub usize);

/// Directed edge `from -> to` with entailment weight in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge<T>(pub StateId, pub StateId, pub T);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Context<T> {
    pub id: ContextId,
    /// p(c), summing to 1 across the world.
    pub prior: T,
    pub valid_states: Vec<StateId>,
    pub edges: Vec<Edge<T>>,
    /// State prior aligned with `valid_states`; strictly positive, sums to 1.
    pub state_prior: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World<T> {
    pub states: Vec<StateId>,
    pub contexts: Vec<Context<T>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("world has no states")]
    NoStates,
    #[error("context {0} has no valid states")]
    EmptyContext(usize),
    #[error("duplicate state {0} in context {1}")]
    DuplicateState(usize, usize),
    #[error("unknown state {0} referenced by context {1}")]
    UnknownState(usize, usize),
    #[error("unknown context id {0}")]
    UnknownContext(usize),
    #[error("edge weight {weight} out of (0, 1] in context {context}")]
    BadEdgeWeight { context: usize, weight: f64 },
    #[error("outgoing weights of state {state} in context {context} sum to {sum} > 1")]
    OutgoingMassExceeded { context: usize, state: usize, sum: f64 },
    #[error("cycle detected in context {0}")]
    Cyclic(usize),
    #[error("context priors sum to {0}, expected 1")]
    ContextPriorSum(f64),
    #[error("state priors of context {0} sum to {1}, expected 1")]
    StatePriorSum(usize, f64),
    #[error("non-positive state prior in context {0}")]
    NonPositiveStatePrior(usize),
    #[error("state prior length mismatch in context {0}")]
    StatePriorLen(usize),
}

const SUM_TOL: f64 = 1e-9;

impl<T: Scalar> Context<T> {
    /// Prior probability of `state` within this context.
    pub fn state_prior_of(&self, state: StateId) -> Option<T> {
        self.valid_states
            .iter()
            .position(|&s| s == state)
            .map(|i| self.state_prior[i])
    }
}

impl<T: Scalar> World<T> {
    pub fn new(states: Vec<StateId>, contexts: Vec<Context<T>>) -> Result<Self, WorldError> {
        let w = World { states, contexts };
        w.validate()?;
        Ok(w)
    }

    pub fn context(&self, id: ContextId) -> Result<&Context<T>, WorldError> {
        self.contexts
            .iter()
            .find(|c| c.id == id)
            .ok_or(WorldError::UnknownContext(id.0))
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.states.is_empty() {
            return Err(WorldError::NoStates);
        }
        let known: BTreeSet<StateId> = self.states.iter().copied().collect();
        let ctx_sum: T = self.contexts.iter().map(|c| c.prior).sum();
        if (ctx_sum.to_f64_lossy() - 1.0).abs() > SUM_TOL {
            return Err(WorldError::ContextPriorSum(ctx_sum.to_f64_lossy()));
        }
        for ctx in &self.contexts {
            let cid = ctx.id.0;
            if ctx.valid_states.is_empty() {
                return Err(WorldError::EmptyContext(cid));
            }
            let mut seen = BTreeSet::new();
            for &s in &ctx.valid_states {
                if !known.contains(&s) {
                    return Err(WorldError::UnknownState(s.0, cid));
                }
                if !seen.insert(s) {
                    return Err(WorldError::DuplicateState(s.0, cid));
                }
            }
            if ctx.state_prior.len() != ctx.valid_states.len() {
                return Err(WorldError::StatePriorLen(cid));
            }
            if ctx.state_prior.iter().any(|&p| p <= T::zero()) {
                return Err(WorldError::NonPositiveStatePrior(cid));
            }
            let ps: T = ctx.state_prior.iter().copied().sum();
            if (ps.to_f64_lossy() - 1.0).abs() > SUM_TOL {
                return Err(WorldError::StatePriorSum(cid, ps.to_f64_lossy()));
            }
            let mut outgoing: BTreeMap<StateId, T> = BTreeMap::new();
            for &Edge(from, to, w) in &ctx.edges {
                if !seen.contains(&from) {
                    return Err(WorldError::UnknownState(from.0, cid));
                }
                if !seen.contains(&to) {
                    return Err(WorldError::UnknownState(to.0, cid));
                }
                if w <= T::zero() || w > T::one() {
                    return Err(WorldError::BadEdgeWeight {
                        context: cid,
                        weight: w.to_f64_lossy(),
                    });
                }
                *outgoing.entry(from).or_insert_with(T::zero) += w;
            }
            for (&s, &sum) in &outgoing {
                if sum.to_f64_lossy() > 1.0 + SUM_TOL {
                    return Err(WorldError::OutgoingMassExceeded {
                        context: cid,
                        state: s.0,
                        sum: sum.to_f64_lossy(),
                    });
                }
            }
            topological_order(&ctx.valid_states, &ctx.edges)
                .ok_or(WorldError::Cyclic(cid))?;
        }
        Ok(())
    }
}

/// Kahn topological sort over the context's states; `None` means a cycle.
pub fn topological_order<T>(
    states: &[StateId],
    edges: &[Edge<T>],
) -> Option<Vec<StateId>> {
    let pos: BTreeMap<StateId, usize> =
        states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = states.len();
    let mut indeg = vec![0usize; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in edges {
        let (f, t) = (pos[&e.0], pos[&e.1]);
        out[f].push(t);
        indeg[t] += 1;
    }
    // Take lowest position first so the order is deterministic.
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    ready.sort_unstable_by(|a, b| b.cmp(a));
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(states[i]);
        for &t in &out[i] {
            indeg[t] -= 1;
            if indeg[t] == 0 {
                let at = ready.binary_search_by(|p| t.cmp(p)).unwrap_or_else(|e| e);
                ready.insert(at, t);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Parameters for seeded random world generation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldGenConfig {
    pub n_states: usize,
    pub n_contexts: usize,
    /// Inclusive bounds on states per context.
    pub states_per_context: (usize, usize),
    /// Probability that each forward pair becomes an edge.
    pub edge_density: f64,
    /// Number of synonym pairs injected per context (states given identical
    /// outgoing edges, hence identical proper entailment structure).
    pub synonym_pairs: usize,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        WorldGenConfig {
            n_states: 100,
            n_contexts: 35,
            states_per_context: (5, 20),
            edge_density: 0.25,
            synonym_pairs: 0,
        }
    }
}

impl<T: Scalar> World<T> {
    /// Seeded random world; identical seeds produce identical worlds.
    pub fn generate(cfg: &WorldGenConfig, seed: u64) -> Result<Self, WorldError> {
        assert!(cfg.n_states > 0 && cfg.n_contexts > 0);
        assert!(cfg.states_per_context.0 >= 1);
        assert!(cfg.states_per_context.0 <= cfg.states_per_context.1);
        assert!(cfg.states_per_context.1 <= cfg.n_states);
        let mut rng = seeds::rng(seed, 0);
        let states: Vec<StateId> = (0..cfg.n_states).map(StateId).collect();

        let mut raw: Vec<f64> = (0..cfg.n_contexts).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter_mut().for_each(|p| *p /= total);

        let mut contexts = Vec::with_capacity(cfg.n_contexts);
        for (i, &prior) in raw.iter().enumerate() {
            let size = rng.gen_range(cfg.states_per_context.0..=cfg.states_per_context.1);
            // Sample `size` distinct states; their draw order is the
            // topological order used for forward edges.
            let mut pool: Vec<usize> = (0..cfg.n_states).collect();
            let mut members = Vec::with_capacity(size);
            for _ in 0..size {
                let k = rng.gen_range(0..pool.len());
                members.push(StateId(pool.swap_remove(k)));
            }
            let mut edges: Vec<Edge<T>> = Vec::new();
            for a in 0..size {
                let mut budget = 1.0f64;
                for b in (a + 1)..size {
                    if rng.gen_bool(cfg.edge_density) {
                        let w = rng.gen_range(0.05..0.6f64).min(budget * 0.95);
                        if w > 1e-3 {
                            edges.push(Edge(members[a], members[b], T::real(w)));
                            budget -= w;
                        }
                    }
                }
            }
            for _ in 0..cfg.synonym_pairs {
                inject_synonym(&members, &mut edges, &mut rng);
            }
            let mut sp: Vec<f64> = (0..size).map(|_| rng.gen_range(0.5..1.5)).collect();
            let st: f64 = sp.iter().sum();
            sp.iter_mut().for_each(|p| *p /= st);
            contexts.push(Context {
                id: ContextId(i),
                prior: T::real(prior),
                valid_states: members,
                edges,
                state_prior: sp.into_iter().map(T::real).collect(),
            });
        }
        World::new(states, contexts)
    }
}

/// Gives some state the same outgoing edges as another, making the two
/// semantically indistinguishable apart from their own identity.
fn inject_synonym<T: Scalar, R: Rng>(
    members: &[StateId],
    edges: &mut Vec<Edge<T>>,
    rng: &mut R,
) {
    let pos: BTreeMap<StateId, usize> =
        members.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let sources: Vec<StateId> = members
        .iter()
        .copied()
        .filter(|s| edges.iter().any(|e| e.0 == *s))
        .collect();
    if sources.is_empty() {
        return;
    }
    let a = sources[rng.gen_range(0..sources.len())];
    let a_edges: Vec<Edge<T>> = edges.iter().copied().filter(|e| e.0 == a).collect();
    let min_target = a_edges.iter().map(|e| pos[&e.1]).min().unwrap();
    let candidates: Vec<StateId> = members
        .iter()
        .copied()
        .filter(|&b| b != a && pos[&b] < min_target)
        .collect();
    if candidates.is_empty() {
        return;
    }
    let b = candidates[rng.gen_range(0..candidates.len())];
    edges.retain(|e| e.0 != b);
    for e in &a_edges {
        edges.push(Edge(b, e.1, e.2));
    }
}
