//! Two-agent contextual signaling game solved by alternating maximization.
//!
//! The speaker maps `(state, context)` pairs to a distribution over `K`
//! codewords; the listener maps codewords back to beliefs over pairs,
//! factored as a per-context state belief times an inferred context weight.
//! A Lagrange multiplier trades listener surprise against transmission cost
//! and is steered by bisection toward a target expected value.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::{prob_floor, Scalar};
use crate::seeds;
use crate::semantics::{
    build_copresheaf_index, conditioned_semantic_information, similarity, CopresheafIndex,
    InfoMode, Prior, SemanticsError,
};
use crate::world::{ContextId, StateId, World, WorldError};

#[derive(Debug, Error)]
pub enum GameError {
    #[error("vocabulary must have at least one codeword")]
    EmptyVocabulary,
    #[error("cost vector length {got} != vocabulary size {expected}")]
    CostLength { expected: usize, got: usize },
    #[error("bisection bracket or tolerance invalid")]
    BadBisection,
    #[error("ctx_weight_smoothing must lie in [0, 1]")]
    BadSmoothing,
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("policy shaped for a different world")]
    ShapeMismatch,
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// How the listener treats feedback during the solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListenerRule {
    /// Multiplicative update of the received codeword's belief from the
    /// revealed true state.
    #[default]
    Feedback,
    /// No belief accumulation: the listener stays at the context priors,
    /// the regime in which free communication has a max-entropy equilibrium.
    Memoryless,
}

/// Which speaker marginal enters the update: previous round's (damped) or
/// one refreshed from the row being built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalMode {
    #[default]
    PrevIterate,
    CurrentIterate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bisection<T> {
    pub lo: T,
    pub hi: T,
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for Bisection<T> {
    fn default() -> Self {
        Bisection { lo: T::zero(), hi: T::real(50.0), tol: T::real(1e-4), max_iter: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameConfig<T> {
    pub vocab_size: usize,
    pub lambda_s: T,
    /// Target expected value; `None` keeps `lambda_s` fixed.
    pub d_level: Option<T>,
    pub costs: Vec<T>,
    pub max_rounds: usize,
    pub nmse_stop_db: T,
    pub bisection: Bisection<T>,
    pub marginal_mode: MarginalMode,
    pub listener_rule: ListenerRule,
    pub info_mode: InfoMode,
    /// Mixes the inferred context weights with the context priors so a
    /// codeword unused inside a context stays reachable for newcomers.
    pub ctx_weight_smoothing: T,
    /// Step size toward the speaker best response each round; 1 is the
    /// undamped update, smaller values suppress best-response overshoot.
    pub speaker_step: T,
}

impl<T: Scalar> GameConfig<T> {
    pub fn new(vocab_size: usize, lambda_s: T) -> Self {
        GameConfig {
            vocab_size,
            lambda_s,
            d_level: None,
            costs: crate::channel::default_costs(vocab_size),
            max_rounds: 100,
            nmse_stop_db: T::real(-50.0),
            bisection: Bisection::default(),
            marginal_mode: MarginalMode::default(),
            listener_rule: ListenerRule::default(),
            info_mode: InfoMode::default(),
            ctx_weight_smoothing: T::real(0.1),
            speaker_step: T::one(),
        }
    }

    pub fn validate(&self) -> Result<(), GameError> {
        if self.vocab_size == 0 {
            return Err(GameError::EmptyVocabulary);
        }
        if self.costs.len() != self.vocab_size {
            return Err(GameError::CostLength {
                expected: self.vocab_size,
                got: self.costs.len(),
            });
        }
        if self.max_rounds == 0 {
            return Err(GameError::NoRounds);
        }
        let b = &self.bisection;
        if !(b.lo >= T::zero() && b.hi > b.lo && b.tol > T::zero()) {
            return Err(GameError::BadBisection);
        }
        if !(self.ctx_weight_smoothing >= T::zero() && self.ctx_weight_smoothing <= T::one())
        {
            return Err(GameError::BadSmoothing);
        }
        if !(self.speaker_step > T::zero() && self.speaker_step <= T::one()) {
            return Err(GameError::BadSmoothing);
        }
        Ok(())
    }
}

/// Per-context caches shared by every update: entailment index, prior,
/// conditioned information values and the pairwise similarity table.
pub struct SemanticWorkspace<T> {
    pub contexts: Vec<ContextCache<T>>,
}

pub struct ContextCache<T> {
    pub id: ContextId,
    pub prior_c: T,
    pub members: Vec<StateId>,
    pub state_prior: Vec<T>,
    pub index: CopresheafIndex<T>,
    pub prior: Prior<T>,
    /// Conditioned semantic information per member state.
    pub s_values: Vec<T>,
    /// Similarity between member states, symmetric.
    pub z_table: Matrix<T>,
}

impl<T: Scalar> SemanticWorkspace<T> {
    pub fn build(
        world: &World<T>,
        history: &[StateId],
        mode: InfoMode,
    ) -> Result<Self, GameError> {
        let mut contexts = Vec::with_capacity(world.contexts.len());
        for ctx in &world.contexts {
            let index = build_copresheaf_index(world, ctx.id)?;
            let prior = Prior::incoming_mass(world, &index)?;
            let n = ctx.valid_states.len();
            let mut s_values = Vec::with_capacity(n);
            for &z in &ctx.valid_states {
                s_values.push(conditioned_semantic_information(
                    z, history, &index, &prior, mode,
                )?);
            }
            let mut z_table = Matrix::zeros(n, n);
            for (i, &a) in ctx.valid_states.iter().enumerate() {
                for (j, &b) in ctx.valid_states.iter().enumerate().skip(i) {
                    let z = similarity(a, b, &index)?;
                    z_table.set(i, j, z);
                    z_table.set(j, i, z);
                }
            }
            contexts.push(ContextCache {
                id: ctx.id,
                prior_c: ctx.prior,
                members: ctx.valid_states.clone(),
                state_prior: ctx.state_prior.clone(),
                index,
                prior,
                s_values,
                z_table,
            });
        }
        Ok(SemanticWorkspace { contexts })
    }

    pub fn n_pairs(&self) -> usize {
        self.contexts.iter().map(|c| c.members.len()).sum()
    }

    /// Flat enumeration of `(context, state)` pairs in world order.
    pub fn pairs(&self) -> Vec<(ContextId, StateId)> {
        self.contexts
            .iter()
            .flat_map(|c| c.members.iter().map(move |&z| (c.id, z)))
            .collect()
    }
}

/// Speaker matrix (pairs x K) plus factored listener beliefs.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyPair<T> {
    pub vocab_size: usize,
    pub pairs: Vec<(ContextId, StateId)>,
    pub speaker: Matrix<T>,
    /// `blocks[c]` is K x |members(c)|, each row a distribution.
    pub blocks: Vec<Matrix<T>>,
    /// K x n_contexts inferred context weights, each row a distribution.
    pub ctx_weights: Matrix<T>,
}

impl<T: Scalar> PolicyPair<T> {
    /// Cold start: uniform speaker rows, listener at the world priors.
    pub fn uniform(ws: &SemanticWorkspace<T>, vocab_size: usize) -> Self {
        let pairs = ws.pairs();
        let k = vocab_size;
        let speaker = Matrix::filled(pairs.len(), k, T::one() / T::real(k as f64));
        let blocks = ws
            .contexts
            .iter()
            .map(|c| {
                let mut m = Matrix::zeros(k, c.members.len());
                for u in 0..k {
                    for (i, &p) in c.state_prior.iter().enumerate() {
                        m.set(u, i, p);
                    }
                }
                m
            })
            .collect();
        let mut ctx_weights = Matrix::zeros(k, ws.contexts.len());
        for u in 0..k {
            for (ci, c) in ws.contexts.iter().enumerate() {
                ctx_weights.set(u, ci, c.prior_c);
            }
        }
        PolicyPair { vocab_size, pairs, speaker, blocks, ctx_weights }
    }

    /// Full listener belief over pairs for codeword `u`, assembled from the
    /// context weights and the per-context blocks.
    pub fn listener_row(&self, u: usize) -> Vec<T> {
        let mut row = Vec::with_capacity(self.pairs.len());
        for (ci, block) in self.blocks.iter().enumerate() {
            let w = self.ctx_weights.get(u, ci);
            for i in 0..block.n_cols() {
                row.push(w * block.get(u, i));
            }
        }
        row
    }

    pub fn listener_matrix(&self) -> Matrix<T> {
        Matrix::from_rows((0..self.vocab_size).map(|u| self.listener_row(u)).collect())
    }

    pub fn pair_index(&self, ctx: ContextId, z: StateId) -> Option<usize> {
        self.pairs.iter().position(|&(c, s)| c == ctx && s == z)
    }
}

/// Codeword marginal under the world priors, normalized exactly.
pub fn codeword_marginal<T: Scalar>(
    ws: &SemanticWorkspace<T>,
    speaker: &Matrix<T>,
) -> Vec<T> {
    let k = speaker.n_cols();
    let mut marg = vec![T::zero(); k];
    let mut at = 0;
    for c in &ws.contexts {
        for (i, _) in c.members.iter().enumerate() {
            let w = c.prior_c * c.state_prior[i];
            for (u, m) in marg.iter_mut().enumerate() {
                *m += w * speaker.get(at, u);
            }
            at += 1;
        }
    }
    let total: T = marg.iter().copied().sum();
    marg.iter_mut().for_each(|m| *m /= total);
    marg
}

/// Entropy in nats of the speaker's codeword marginal.
pub fn speaker_entropy<T: Scalar>(ws: &SemanticWorkspace<T>, pair: &PolicyPair<T>) -> T {
    let floor = prob_floor::<T>();
    codeword_marginal(ws, &pair.speaker)
        .into_iter()
        .filter(|&p| p > T::zero())
        .map(|p| -p * p.max(floor).ln())
        .sum()
}

/// One sweep of the speaker best response. Rows whose information-mass slope
/// vanishes collapse onto the cheapest codeword; the returned counter says
/// how many did.
pub fn speaker_update<T: Scalar>(
    prev: &PolicyPair<T>,
    ws: &SemanticWorkspace<T>,
    cfg: &GameConfig<T>,
) -> (Matrix<T>, u64) {
    let floor = prob_floor::<T>();
    let k = cfg.vocab_size;
    let marginal = codeword_marginal(ws, &prev.speaker);
    let listener = prev.listener_matrix();
    let build = |marg: &[T]| {
        let mut out = Matrix::zeros(prev.pairs.len(), k);
        let mut collapsed = 0u64;
        let mut at = 0;
        for c in &ws.contexts {
            for (i, _) in c.members.iter().enumerate() {
                let denom = c.s_values[i] * c.state_prior[i];
                if denom < floor {
                    // No semantic mass to spend: send the cheapest codeword.
                    let cheapest = argmin(&cfg.costs);
                    out.set(at, cheapest, T::one());
                    collapsed += 1;
                } else {
                    let mut scores = Vec::with_capacity(k);
                    for u in 0..k {
                        let surprise = cfg.costs[u]
                            - listener.get(u, at).max(floor).ln();
                        scores.push(
                            marg[u].max(floor).ln() - cfg.lambda_s * surprise / denom,
                        );
                    }
                    softmax_into(&scores, out.row_mut(at));
                }
                at += 1;
            }
        }
        (out, collapsed)
    };
    let (first, collapsed) = build(&marginal);
    match cfg.marginal_mode {
        MarginalMode::PrevIterate => (first, collapsed),
        MarginalMode::CurrentIterate => {
            let refreshed = codeword_marginal(ws, &first);
            build(&refreshed)
        }
    }
}

fn argmin<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn softmax_into<T: Scalar>(scores: &[T], out: &mut [T]) {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Multiplicative belief update of one listener block row from revealed
/// feedback `z_true`. Each candidate keeps mass proportional to its previous
/// belief scaled by exp(-1 / (mass * S * Z)), where S is the conditioned
/// information of the revealed state and Z the candidate's similarity to it.
/// The factor grows with Z, so the revealed state itself (Z = 1) always gets
/// the largest boost and dissimilar candidates are wiped to the floor.
/// Exponents are shifted by their maximum before exponentiating so weakly
/// informative transmissions do not underflow the whole row. A tilt where
/// the transmission carries no evidence at all resets the row to uniform;
/// returns true in that case.
fn tilt_block_row<T: Scalar>(
    block: &mut Matrix<T>,
    u: usize,
    cache: &ContextCache<T>,
    zi_true: usize,
    speaker_mass: T,
) -> bool {
    let floor = prob_floor::<T>();
    let n = block.n_cols();
    let s_true = cache.s_values[zi_true];
    if s_true <= floor || speaker_mass <= floor {
        let uni = T::one() / T::real(n as f64);
        for i in 0..n {
            block.set(u, i, uni);
        }
        return true;
    }
    let scale = speaker_mass * s_true;
    let mut exps = vec![None; n];
    let mut x_max = T::real(f64::NEG_INFINITY);
    for (i, x) in exps.iter_mut().enumerate() {
        let z_sim = cache.z_table.get(i, zi_true);
        if z_sim > T::zero() {
            let e = -(T::one() / (scale * z_sim));
            *x = Some(e);
            x_max = x_max.max(e);
        }
    }
    let mut raw = vec![T::zero(); n];
    let mut any = false;
    for (i, r) in raw.iter_mut().enumerate() {
        if let Some(e) = exps[i] {
            *r = block.get(u, i) * (e - x_max).exp();
            if *r > T::zero() {
                any = true;
            }
        }
    }
    if !any {
        let uni = T::one() / T::real(n as f64);
        for i in 0..n {
            block.set(u, i, uni);
        }
        return true;
    }
    let total: T = raw.iter().copied().sum();
    for (i, r) in raw.iter().enumerate() {
        block.set(u, i, (*r / total).max(floor));
    }
    // Restore normalization after flooring.
    let total: T = block.row(u).iter().copied().sum();
    for v in block.row_mut(u) {
        *v /= total;
    }
    false
}

/// Context weights inferred from the speaker: how likely each context is
/// given that codeword `u` was heard, mixed with the context priors by
/// `smoothing` so unused codewords keep a usable weight everywhere.
fn refresh_ctx_weights<T: Scalar>(
    ws: &SemanticWorkspace<T>,
    speaker: &Matrix<T>,
    ctx_weights: &mut Matrix<T>,
    smoothing: T,
) {
    let floor = prob_floor::<T>();
    let k = ctx_weights.n_rows();
    for u in 0..k {
        let mut at = 0;
        for (ci, c) in ws.contexts.iter().enumerate() {
            let mut usage = T::zero();
            for (i, _) in c.members.iter().enumerate() {
                usage += c.state_prior[i] * speaker.get(at + i, u);
            }
            at += c.members.len();
            ctx_weights.set(u, ci, (c.prior_c * usage).max(floor));
        }
        ctx_weights.normalize_row(u);
        for (ci, c) in ws.contexts.iter().enumerate() {
            let mixed = (T::one() - smoothing) * ctx_weights.get(u, ci)
                + smoothing * c.prior_c;
            ctx_weights.set(u, ci, mixed);
        }
    }
}

/// Context weights from the held conventions of the round solver: usage of
/// codeword `u` in context `c` is the prior mass of the members currently
/// assigned to `u`. Soft speaker rows lag a fresh assignment by several
/// rounds, so weighting by them would starve every newly tried codeword of
/// context credit.
fn refresh_ctx_weights_held<T: Scalar>(
    ws: &SemanticWorkspace<T>,
    held: &[Option<usize>],
    weights: &mut Matrix<T>,
    smoothing: T,
) {
    let floor = prob_floor::<T>();
    let k = weights.n_rows();
    for u in 0..k {
        let mut at = 0;
        for (ci, c) in ws.contexts.iter().enumerate() {
            let mut usage = T::zero();
            for (i, _) in c.members.iter().enumerate() {
                if held[at + i] == Some(u) {
                    usage += c.state_prior[i];
                }
            }
            at += c.members.len();
            weights.set(u, ci, (c.prior_c * usage).max(floor));
        }
        weights.normalize_row(u);
        for (ci, c) in ws.contexts.iter().enumerate() {
            let mixed = (T::one() - smoothing) * weights.get(u, ci) + smoothing * c.prior_c;
            weights.set(u, ci, mixed);
        }
    }
}

/// Full listener update from one revealed state: every codeword's belief in
/// `z_true`'s context is tilted (weighted by how much the speaker uses that
/// codeword for `z_true`) and the context weights are refreshed. Returns the
/// number of rows that fully floored.
pub fn listener_update<T: Scalar>(
    prev: &PolicyPair<T>,
    ws: &SemanticWorkspace<T>,
    cfg: &GameConfig<T>,
    ctx: ContextId,
    z_true: StateId,
) -> Result<(PolicyPair<T>, u64), GameError> {
    let ci = ws
        .contexts
        .iter()
        .position(|c| c.id == ctx)
        .ok_or(GameError::ShapeMismatch)?;
    let cache = &ws.contexts[ci];
    let zi = cache
        .members
        .iter()
        .position(|&s| s == z_true)
        .ok_or(SemanticsError::UnknownState(z_true.0))
        .map_err(GameError::from)?;
    let pair_at = prev.pair_index(ctx, z_true).ok_or(GameError::ShapeMismatch)?;
    let mut next = prev.clone();
    let mut floored = 0u64;
    for u in 0..prev.vocab_size {
        let mass = prev.speaker.get(pair_at, u);
        if tilt_block_row(&mut next.blocks[ci], u, cache, zi, mass) {
            floored += 1;
        }
    }
    refresh_ctx_weights(ws, &next.speaker, &mut next.ctx_weights, cfg.ctx_weight_smoothing);
    Ok((next, floored))
}

/// Expected communication value: transmission cost plus listener surprise,
/// averaged under the world priors and the speaker policy. Infinite when the
/// listener puts exactly zero mass where the speaker sends.
pub fn expected_v<T: Scalar>(
    ws: &SemanticWorkspace<T>,
    pair: &PolicyPair<T>,
    costs: &[T],
) -> T {
    let listener = pair.listener_matrix();
    let mut total = T::zero();
    let mut at = 0;
    for c in &ws.contexts {
        for (i, _) in c.members.iter().enumerate() {
            let w = c.prior_c * c.state_prior[i];
            for u in 0..pair.vocab_size {
                let ps = pair.speaker.get(at, u);
                if ps > T::zero() {
                    let pl = listener.get(u, at);
                    if pl <= T::zero() {
                        return T::infinity();
                    }
                    total += w * ps * (costs[u] - pl.ln());
                }
            }
            at += 1;
        }
    }
    total
}

/// Relative squared change of the concatenated speaker and listener
/// matrices, in dB, clamped at -300.
pub fn nmse_db<T: Scalar>(curr: &PolicyPair<T>, prev: &PolicyPair<T>) -> T {
    let num = curr.speaker.diff_sq(&prev.speaker)
        + curr.listener_matrix().diff_sq(&prev.listener_matrix());
    let den = prev.speaker.frobenius_sq() + prev.listener_matrix().frobenius_sq();
    let ratio = num / den.max(T::real(1e-30));
    let db = T::real(10.0) * ratio.max(T::zero()).log10();
    db.max(T::real(-300.0))
}

/// Speaker-side decomposition and listener-side semantic rate, both averaged
/// over the world priors. The listener side is evaluated at the Bayes belief
/// the current speaker induces, so a one-codeword vocabulary scores exactly
/// zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticRate<T> {
    pub listener_rate: T,
    pub speaker_rate: T,
    pub bits_term: T,
    pub semantics_term: T,
}

pub fn semantic_rate<T: Scalar>(ws: &SemanticWorkspace<T>, pair: &PolicyPair<T>) -> SemanticRate<T> {
    let floor = prob_floor::<T>();
    let k = pair.vocab_size;
    let marginal = codeword_marginal(ws, &pair.speaker);
    let mut listener_rate = T::zero();
    let mut speaker_rate = T::zero();
    let mut bits_term = T::zero();
    let mut semantics_term = T::zero();
    let mut base = 0;
    for c in &ws.contexts {
        let n = c.members.len();
        for i in 0..n {
            let w = c.prior_c * c.state_prior[i];
            let s_val = c.s_values[i];
            // Speaker side: information bits weighted by semantic mass.
            let mut bits = T::zero();
            for u in 0..k {
                let ps = pair.speaker.get(base + i, u);
                if ps > T::zero() {
                    bits += ps * (ps.max(floor) / marginal[u].max(floor)).ln();
                }
            }
            bits_term += w * bits;
            semantics_term += w * s_val;
            speaker_rate += w * bits * s_val;
            // Listener side: Bayes belief over same-context candidates,
            // weighted by similarity to the true state.
            let mut inner = T::zero();
            for u in 0..k {
                let ps = pair.speaker.get(base + i, u);
                if ps <= T::zero() {
                    continue;
                }
                let mut bracket = T::zero();
                for j in 0..n {
                    let z_sim = c.z_table.get(j, i);
                    if z_sim <= T::zero() {
                        continue;
                    }
                    let pj = pair.speaker.get(base + j, u);
                    if pj <= T::zero() {
                        continue;
                    }
                    let bayes =
                        c.prior_c * c.state_prior[j] * pj / marginal[u].max(floor);
                    bracket += bayes
                        * (pj.max(floor) / marginal[u].max(floor)).ln()
                        * z_sim;
                }
                inner += ps * bracket;
            }
            listener_rate += w * s_val * inner;
        }
        base += n;
    }
    SemanticRate { listener_rate, speaker_rate, bits_term, semantics_term }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow<T> {
    pub round: usize,
    pub nmse_db: T,
    pub expected_v: T,
    pub lambda_s: T,
    pub speaker_entropy: T,
    pub listener_semantic_rate: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace<T> {
    pub rows: Vec<TraceRow<T>>,
    pub converged: bool,
    pub rounds_run: usize,
    pub lambda_final: T,
    pub speaker_guard_collapses: u64,
    pub listener_floored_rows: u64,
}

pub struct SolveReport<T> {
    pub pair: PolicyPair<T>,
    pub trace: ConvergenceTrace<T>,
}

/// Alternating maximization over full context sweeps. Each round updates the
/// speaker, then walks every `(context, state)` pair in order, samples the
/// codeword the speaker would send and updates that codeword's belief; the
/// multiplier moves by one bisection step toward the target expected value.
/// Codeword draws use one persistent uniform quantile per pair (common
/// random numbers), so once the speaker stops moving the sampled sweep
/// replays identically and the iteration has an exact fixed point.
/// Non-convergence within `max_rounds` is flagged on the trace, not an error.
pub fn solve_language<T: Scalar>(
    world: &World<T>,
    cfg: &GameConfig<T>,
    seed: u64,
    warm: Option<&PolicyPair<T>>,
) -> Result<SolveReport<T>, GameError> {
    cfg.validate()?;
    let ws = SemanticWorkspace::build(world, &[], cfg.info_mode)?;
    let mut pair = match warm {
        Some(p) => {
            if p.pairs != ws.pairs() || p.vocab_size != cfg.vocab_size {
                return Err(GameError::ShapeMismatch);
            }
            p.clone()
        }
        None => PolicyPair::uniform(&ws, cfg.vocab_size),
    };
    let mut rng = seeds::rng(seed, 1);
    let quantiles: Vec<T> = (0..pair.pairs.len())
        .map(|_| T::real(rng.gen::<f64>()))
        .collect();
    // Sticky conventions: a pair keeps sending its held codeword while the
    // speaker still backs it with at least half the row maximum, and only
    // re-samples when that convention collapses.
    let mut held_u: Vec<Option<usize>> = vec![None; pair.pairs.len()];
    // Rounds since the last assignment flip. While conventions are still
    // moving the speaker takes damped steps; once they have been quiet for a
    // while the listener side is static, so full best response steps are
    // stable and close the remaining gap geometrically.
    let mut quiet = 0usize;
    let mut lambda = cfg.lambda_s;
    let mut lo = cfg.bisection.lo;
    let mut hi = cfg.bisection.hi;
    let mut bisection_steps = 0usize;
    let mut trace = ConvergenceTrace {
        rows: Vec::new(),
        converged: false,
        rounds_run: 0,
        lambda_final: lambda,
        speaker_guard_collapses: 0,
        listener_floored_rows: 0,
    };

    for round in 1..=cfg.max_rounds {
        let prev = pair.clone();
        let round_cfg = GameConfig { lambda_s: lambda, ..cfg.clone() };
        let (speaker, collapsed) = speaker_update(&pair, &ws, &round_cfg);
        trace.speaker_guard_collapses += collapsed;
        let step = if quiet >= 5 { T::one() } else { cfg.speaker_step };
        if step < T::one() {
            let gamma = step;
            let keep = T::one() - gamma;
            for r in 0..pair.speaker.n_rows() {
                for u in 0..pair.speaker.n_cols() {
                    let mixed = keep * pair.speaker.get(r, u) + gamma * speaker.get(r, u);
                    pair.speaker.set(r, u, mixed);
                }
            }
        } else {
            pair.speaker = speaker;
        }

        let mut flips = 0usize;
        if cfg.listener_rule == ListenerRule::Feedback {
            // Quasi-static beliefs: rebuild every block from the state
            // priors and fold in this round's transmissions. Tilts compose
            // within the round but never compound across rounds, so a
            // steady language induces a steady belief.
            for (ci, c) in ws.contexts.iter().enumerate() {
                for u in 0..cfg.vocab_size {
                    for (i, &p) in c.state_prior.iter().enumerate() {
                        pair.blocks[ci].set(u, i, p);
                    }
                }
            }
            // A held codeword is released once the speaker prefers another
            // by more than the margin `tau`. Early rounds use a factor of
            // two so badly placed conventions can still move; from 40% of
            // the round budget onward the margin doubles every eight rounds,
            // which starves late contested flips and lets the policies
            // settle onto a fixed point. A released pair follows its row
            // argmax half the time and explores uniformly otherwise: pure
            // exploration rarely lands on the codeword the row already
            // demands, while pure argmax can lock into reassignment cycles.
            let anneal = (round.saturating_sub(cfg.max_rounds * 2 / 5) / 8).min(60) as i32;
            let tau = T::real(2.0 * 2f64.powi(anneal));
            let mut base = 0;
            for (ci, c) in ws.contexts.iter().enumerate() {
                for (i, _) in c.members.iter().enumerate() {
                    let at = base + i;
                    let row = pair.speaker.row(at);
                    let rowmax = row.iter().copied().fold(T::zero(), T::max);
                    let u = match held_u[at] {
                        Some(u) if row[u] * tau >= rowmax => u,
                        Some(_) => {
                            if rng.gen::<f64>() < 0.5 {
                                argmax_row(row)
                            } else {
                                rng.gen_range(0..cfg.vocab_size)
                            }
                        }
                        None => sample_row(row, quantiles[at]),
                    };
                    if held_u[at] != Some(u) {
                        flips += 1;
                    }
                    held_u[at] = Some(u);
                    // The utterance is a concrete sample, so it carries unit
                    // evidence. Weighting by the speaker's private mixing
                    // probability would couple belief sharpness to row mass
                    // and sustain an oscillation through the score
                    // amplification.
                    if tilt_block_row(&mut pair.blocks[ci], u, c, i, T::one()) {
                        trace.listener_floored_rows += 1;
                    }
                }
                base += c.members.len();
            }
            refresh_ctx_weights_held(&ws, &held_u, &mut pair.ctx_weights, cfg.ctx_weight_smoothing);
        }
        if flips == 0 {
            quiet += 1;
        } else {
            quiet = 0;
        }

        let ev = expected_v(&ws, &pair, &cfg.costs);
        if let Some(d) = cfg.d_level {
            if bisection_steps < cfg.bisection.max_iter && (ev - d).abs() > cfg.bisection.tol
            {
                if ev > d {
                    lo = lambda;
                } else {
                    hi = lambda;
                }
                lambda = (lo + hi) / T::real(2.0);
                bisection_steps += 1;
            }
        }

        let nmse = nmse_db(&pair, &prev);
        let rate = semantic_rate(&ws, &pair);
        trace.rows.push(TraceRow {
            round,
            nmse_db: nmse,
            expected_v: ev,
            lambda_s: lambda,
            speaker_entropy: speaker_entropy(&ws, &pair),
            listener_semantic_rate: rate.listener_rate,
        });
        trace.rounds_run = round;
        if nmse <= cfg.nmse_stop_db {
            trace.converged = true;
            break;
        }
    }
    trace.lambda_final = lambda;
    Ok(SolveReport { pair, trace })
}

fn sample_row<T: Scalar>(row: &[T], quantile: T) -> usize {
    let mut t = quantile;
    for (i, &p) in row.iter().enumerate() {
        t -= p;
        if t <= T::zero() {
            return i;
        }
    }
    row.len() - 1
}

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Serialized form: materialized matrices with the pair enumeration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct PolicyPairDoc<T> {
    pub vocab_size: usize,
    pub pairs: Vec<(ContextId, StateId)>,
    pub context_sizes: Vec<usize>,
    pub speaker: Matrix<T>,
    pub listener: Matrix<T>,
}

impl<T: Scalar + Serialize + for<'a> Deserialize<'a>> PolicyPair<T> {
    pub fn to_doc(&self) -> PolicyPairDoc<T> {
        PolicyPairDoc {
            vocab_size: self.vocab_size,
            pairs: self.pairs.clone(),
            context_sizes: self.blocks.iter().map(Matrix::n_cols).collect(),
            speaker: self.speaker.clone(),
            listener: self.listener_matrix(),
        }
    }

    /// Rebuilds the factored listener by splitting each row into context
    /// spans: span mass becomes the context weight, the span renormalized
    /// becomes the belief block.
    pub fn from_doc(doc: PolicyPairDoc<T>) -> Result<Self, GameError> {
        let k = doc.vocab_size;
        let n_pairs: usize = doc.context_sizes.iter().sum();
        if doc.pairs.len() != n_pairs
            || doc.speaker.n_rows() != n_pairs
            || doc.speaker.n_cols() != k
            || doc.listener.n_rows() != k
            || doc.listener.n_cols() != n_pairs
        {
            return Err(GameError::ShapeMismatch);
        }
        let mut blocks = Vec::with_capacity(doc.context_sizes.len());
        let mut ctx_weights = Matrix::zeros(k, doc.context_sizes.len());
        let mut base = 0;
        for (ci, &len) in doc.context_sizes.iter().enumerate() {
            let mut block = Matrix::zeros(k, len);
            for u in 0..k {
                let mut mass = T::zero();
                for i in 0..len {
                    mass += doc.listener.get(u, base + i);
                }
                ctx_weights.set(u, ci, mass);
                for i in 0..len {
                    let v = if mass > T::zero() {
                        doc.listener.get(u, base + i) / mass
                    } else {
                        T::one() / T::real(len as f64)
                    };
                    block.set(u, i, v);
                }
            }
            blocks.push(block);
            base += len;
        }
        for u in 0..k {
            ctx_weights.normalize_row(u);
        }
        Ok(PolicyPair {
            vocab_size: k,
            pairs: doc.pairs,
            speaker: doc.speaker,
            blocks,
            ctx_weights,
        })
    }
}
