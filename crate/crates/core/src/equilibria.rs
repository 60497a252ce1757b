//! Equilibrium classification for converged signaling policies, and the
//! partial-pooling semantic codec: a partition of one context's states into
//! cells with a representative state per cell, refined by alternating
//! assignment and medoid steps under the semantic distance.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::PolicyPair;
use crate::scalar::Scalar;
use crate::seeds;
use crate::semantics::{semantic_distance, CopresheafIndex, Prior, SemanticsError};
use crate::world::{ContextId, StateId, World, WorldError};

#[derive(Debug, Error)]
pub enum EquilibriaError {
    #[error("requested {k} cells but the context has {n} states")]
    TooManyCells { k: usize, n: usize },
    #[error("a code needs at least one cell")]
    NoCells,
    #[error("codeword {0} does not index a cell")]
    UnknownCodeword(usize),
    #[error("policy does not cover context {0}")]
    MissingContext(usize),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumKind {
    Separating,
    Pooling,
    PartialPooling,
}

/// Hard-assignment summary of a converged speaker in one context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquilibriumLabel {
    pub kind: EquilibriumKind,
    /// Number of states mapped to each codeword.
    pub evidence: Vec<usize>,
}

/// Partition of one context's states into cells, each decoded to its
/// representative state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoronoiCode {
    pub context: ContextId,
    pub cells: Vec<Vec<StateId>>,
    pub representatives: Vec<StateId>,
}

/// Hard-assigns each state of `context` to its most used codeword (ties to
/// the lowest index) and labels the pattern: every used codeword covering
/// one state is separating, a single used codeword is pooling, anything
/// else is partial pooling.
pub fn classify_equilibrium<T: Scalar>(
    pair: &PolicyPair<T>,
    world: &World<T>,
    context: ContextId,
) -> Result<EquilibriumLabel, EquilibriaError> {
    let ctx = world.context(context)?;
    let mut evidence = vec![0usize; pair.vocab_size];
    for &z in &ctx.valid_states {
        let at = pair
            .pair_index(context, z)
            .ok_or(EquilibriaError::MissingContext(context.0))?;
        let row = pair.speaker.row(at);
        let mut best = 0;
        for (u, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = u;
            }
        }
        evidence[best] += 1;
    }
    let used = evidence.iter().filter(|&&c| c > 0).count();
    let kind = if evidence.iter().all(|&c| c <= 1) {
        EquilibriumKind::Separating
    } else if used == 1 {
        EquilibriumKind::Pooling
    } else {
        EquilibriumKind::PartialPooling
    };
    Ok(EquilibriumLabel { kind, evidence })
}

/// Prior-weighted within-cell semantic distance of a code; the quantity the
/// alternation is descending.
pub fn code_objective<T: Scalar>(
    code: &VoronoiCode,
    world: &World<T>,
    idx: &CopresheafIndex<T>,
) -> Result<T, EquilibriaError> {
    let ctx = world.context(code.context)?;
    let prior = Prior::incoming_mass(world, idx)?;
    let mut total = T::zero();
    for (k, cell) in code.cells.iter().enumerate() {
        let rep = code.representatives[k];
        for &z in cell {
            let i = ctx
                .valid_states
                .iter()
                .position(|&s| s == z)
                .ok_or(SemanticsError::UnknownState(z.0))?;
            total += ctx.state_prior[i] * semantic_distance(z, rep, idx, &prior)?;
        }
    }
    Ok(total)
}

/// Builds a `K`-cell code for one context by Lloyd alternation: assign each
/// state to the cell with the nearest representative, then recompute each
/// representative as the prior-weighted medoid of its cell, until the
/// assignment stops changing. Representatives range over all of the
/// context's states, not just the cell. Initial representatives are `K`
/// distinct states drawn without replacement from the seed.
pub fn lloyd_voronoi<T: Scalar>(
    world: &World<T>,
    idx: &CopresheafIndex<T>,
    context: ContextId,
    k: usize,
    seed: u64,
) -> Result<VoronoiCode, EquilibriaError> {
    let ctx = world.context(context)?;
    let n = ctx.valid_states.len();
    if k == 0 {
        return Err(EquilibriaError::NoCells);
    }
    if k > n {
        return Err(EquilibriaError::TooManyCells { k, n });
    }
    let prior = Prior::incoming_mass(world, idx)?;
    let mut dist = vec![vec![T::zero(); n]; n];
    for (i, &a) in ctx.valid_states.iter().enumerate() {
        for (j, &b) in ctx.valid_states.iter().enumerate() {
            dist[i][j] = semantic_distance(a, b, idx, &prior)?;
        }
    }

    let mut rng = seeds::rng(seed, 2);
    let mut reps: Vec<usize> = sample(&mut rng, n, k).into_iter().collect();
    let mut assign = vec![usize::MAX; n];

    for _ in 0..n * k {
        // Assignment step: nearest representative, ties to the lowest cell.
        let mut next = vec![0usize; n];
        for (i, slot) in next.iter_mut().enumerate() {
            let mut best = 0;
            for c in 1..k {
                if dist[i][reps[c]] < dist[i][reps[best]] {
                    best = c;
                }
            }
            *slot = best;
        }
        // Empty-cell repair: move the state farthest from its representative
        // out of the largest cell.
        loop {
            let Some(empty) = (0..k).find(|&c| !next.contains(&c)) else {
                break;
            };
            let mut counts = vec![0usize; k];
            for &c in &next {
                counts[c] += 1;
            }
            let donor = (0..k).max_by_key(|&c| counts[c]).unwrap();
            let moved = (0..n)
                .filter(|&i| next[i] == donor)
                .max_by(|&a, &b| {
                    dist[a][reps[donor]]
                        .partial_cmp(&dist[b][reps[donor]])
                        .unwrap()
                })
                .unwrap();
            next[moved] = empty;
            reps[empty] = moved;
        }
        if next == assign {
            break;
        }
        assign = next;
        // Medoid step: candidate minimizing the prior-weighted distance of
        // the cell; ties prefer an in-cell candidate, then the lowest index.
        for c in 0..k {
            let mut best: Option<(T, bool, usize)> = None;
            for cand in 0..n {
                let mut total = T::zero();
                for i in 0..n {
                    if assign[i] == c {
                        total += ctx.state_prior[i] * dist[i][cand];
                    }
                }
                let in_cell = assign[cand] == c;
                let better = match &best {
                    None => true,
                    Some((t, ic, bi)) => {
                        total < *t
                            || (total == *t && in_cell && !*ic)
                            || (total == *t && in_cell == *ic && cand < *bi)
                    }
                };
                if better {
                    best = Some((total, in_cell, cand));
                }
            }
            reps[c] = best.unwrap().2;
        }
    }

    let mut cells = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        cells[c].push(ctx.valid_states[i]);
    }
    Ok(VoronoiCode {
        context,
        cells,
        representatives: reps.iter().map(|&r| ctx.valid_states[r]).collect(),
    })
}

/// Decodes a codeword to its cell's representative state.
pub fn bayes_decode<T: Scalar>(
    u: usize,
    code: &VoronoiCode,
    world: &World<T>,
) -> Result<StateId, EquilibriaError> {
    if u >= code.cells.len() {
        return Err(EquilibriaError::UnknownCodeword(u));
    }
    let ctx = world.context(code.context)?;
    let rep = code.representatives[u];
    if !ctx.valid_states.contains(&rep) {
        return Err(SemanticsError::UnknownState(rep.0).into());
    }
    Ok(rep)
}

/// Encodes a state as the index of the cell containing it.
pub fn voronoi_encode(z: StateId, code: &VoronoiCode) -> Option<usize> {
    code.cells.iter().position(|cell| cell.contains(&z))
}
