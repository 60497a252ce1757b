//! Property sweeps for the coding-length bracket and the error-probability
//! floors on randomized worlds and noisy pipelines.

use rand::Rng;

use semlang_core::channel::{bsc_transmit, huffman_codebook};
use semlang_core::metrics::{check_error_bounds, length_bounds_with_huffman};
use semlang_core::semantics::build_copresheaf_index;
use semlang_core::world::{Context, ContextId, Edge, StateId, World, WorldGenConfig};
use semlang_core::{seeds, Real};

fn sweep_config(seed: u64) -> WorldGenConfig {
    let mut rng = seeds::rng(seed, 11);
    let n_states = rng.gen_range(8..=32usize);
    WorldGenConfig {
        n_states,
        n_contexts: rng.gen_range(3..=8),
        states_per_context: (2, n_states.min(8)),
        edge_density: 0.25,
        synonym_pairs: rng.gen_range(0..=1),
    }
}

#[test]
fn huffman_length_sits_inside_the_bracket_on_random_worlds() {
    for seed in 0..1000u64 {
        let world: World<Real> = World::generate(&sweep_config(seed), seed).unwrap();
        let report = length_bounds_with_huffman(&world).unwrap();
        assert!(
            report.contextual.satisfied,
            "seed {seed}: {} <= {} <= {} violated",
            report.contextual.lower, report.contextual.measured, report.contextual.upper
        );
        assert!(
            report.contextual.lower <= report.classical_lower + 1e-9,
            "seed {seed}: contextual floor above the context-blind floor"
        );
        // Rounding each length up costs strictly less than one bit.
        assert!(
            report.contextual.upper - report.contextual.lower < 1.0 + 1e-9,
            "seed {seed}: ceiling slack of a full bit or more"
        );
    }
}

/// Single-context world with two tiers: 64 content states, each entailing
/// one or two of 8 shared tail states plus occasional forward chains into
/// later content, and two synonym pairs made by copying outgoing edges.
/// Tail states get a tiny prior so their Huffman codewords sit in a longer
/// length class than any content codeword and the two tiers never decode
/// into each other.
fn pipeline_world(seed: u64) -> World<Real> {
    let n_content = 64usize;
    let n_tails = 8usize;
    let n = n_content + n_tails;
    let mut rng = seeds::rng(seed, 12);

    let mut order: Vec<usize> = (0..n_content).collect();
    for i in (1..n_content).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut edges = Vec::new();
    let mut outgoing: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_content];
    for (k, &c) in order.iter().enumerate() {
        let n_tail_edges = rng.gen_range(1..=2usize);
        let mut picked = Vec::new();
        for _ in 0..n_tail_edges {
            let t = rng.gen_range(0..n_tails);
            if !picked.contains(&t) {
                picked.push(t);
                outgoing[c].push((n_content + t, rng.gen_range(0.2..0.35)));
            }
        }
        if k + 1 < n_content && rng.gen_bool(0.15) {
            let later = order[rng.gen_range(k + 1..n_content)];
            outgoing[c].push((later, rng.gen_range(0.15..0.3)));
        }
    }
    // Two synonym pairs: the earlier state in draw order adopts the later
    // one's outgoing edges, which keeps every content edge forward.
    for _ in 0..2 {
        let ka = rng.gen_range(0..n_content / 2);
        let kb = rng.gen_range(n_content / 2..n_content);
        outgoing[order[ka]] = outgoing[order[kb]].clone();
    }
    for (c, outs) in outgoing.iter().enumerate() {
        for &(to, w) in outs {
            edges.push(Edge(StateId(c), StateId(to), w));
        }
    }

    let tail_prior = 0.0008f64;
    let content_mass = 1.0 - tail_prior * n_tails as f64;
    let mut prior: Vec<f64> = (0..n_content).map(|_| rng.gen_range(0.9..1.1)).collect();
    let total: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p *= content_mass / total);
    prior.extend(std::iter::repeat(tail_prior).take(n_tails));

    let states: Vec<StateId> = (0..n).map(StateId).collect();
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

/// One transmit pipeline over [`pipeline_world`]: state drawn from the
/// context prior, Huffman-coded, sent through a binary symmetric channel,
/// decoded to the nearest same-length codeword.
fn run_pipeline(seed: u64, flip: f64, trials: usize) -> (World<Real>, Vec<(StateId, StateId)>) {
    let world = pipeline_world(seed);
    let ctx = &world.contexts[0];
    let codebook = huffman_codebook(&ctx.state_prior).unwrap();
    let mut rng = seeds::rng(seed, 12);
    let mut samples = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut u: Real = rng.gen::<f64>();
        let mut zi = ctx.valid_states.len() - 1;
        for (i, &p) in ctx.state_prior.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                zi = i;
                break;
            }
        }
        let bits = codebook.encode(&[zi]).unwrap();
        let received = bsc_transmit(&bits, flip, seeds::derive(seed, t as u64));
        let decoded = codebook.decode_slot(&received);
        samples.push((ctx.valid_states[zi], ctx.valid_states[decoded]));
    }
    (world, samples)
}

#[test]
fn noisy_pipelines_respect_the_error_floors() {
    for seed in 0..10u64 {
        for &flip in &[0.05f64, 0.1] {
            let (world, samples) = run_pipeline(seed, flip, 10_000);
            let ctx = world.contexts[0].id;
            let index = build_copresheaf_index(&world, ctx).unwrap();
            let report = check_error_bounds(&samples, &index, world.states.len()).unwrap();
            assert!(
                report.semantic_error <= report.syntactic_error,
                "seed {seed} flip {flip}: semantic above syntactic"
            );
            assert!(
                report.satisfied,
                "seed {seed} flip {flip}: a bound is violated: {report:?}"
            );
            assert!(
                report.ordering_ok,
                "seed {seed} flip {flip}: classical bound below semantic bound: {report:?}"
            );
        }
    }
}

#[test]
fn synonym_worlds_show_strictly_smaller_semantic_error() {
    let mut strict = 0usize;
    for seed in 0..10u64 {
        let (world, samples) = run_pipeline(seed, 0.1, 10_000);
        let ctx = world.contexts[0].id;
        let index = build_copresheaf_index(&world, ctx).unwrap();
        let report = check_error_bounds(&samples, &index, world.states.len()).unwrap();
        if report.semantic_error < report.syntactic_error {
            strict += 1;
        }
    }
    assert!(strict >= 8, "only {strict}/10 pipelines had semantic slack");
}
