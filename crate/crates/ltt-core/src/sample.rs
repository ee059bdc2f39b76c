//! Stack-driven depth-first sampling: the generative traversal end to end,
//! including conditional generation from a chosen root with preloaded
//! context and scope.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ast::{
    AnnotatedKind, AstNode, Child, NodeKind, ScopeTag, Symbol, Token, TokenKind, Tree, TupleKey,
};
use crate::baselines::PcfgModel;
use crate::error::{Error, Result};
use crate::model::{
    children_distribution, context_repr, scope_candidate_ids, scope_token_distribution,
    LatentChain, LttModel, SupportTable,
};
use crate::trace::{
    extract_records, CtxSnapshot, DeterministicContext, ScopeTracker, TraversalEvent,
    VariableFeatureVector,
};
use crate::train::{forward_backward, rng_for, TransitionModel};

/// How to start and bound a sampling run.
#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub root: NodeKind,
    pub seed: u64,
    pub max_expansions: usize,
    /// Variables placed in scope before generation starts: (identifier,
    /// declared type).
    pub initial_scope: Vec<(String, String)>,
    /// Tokens seeded into the last-tokens window.
    pub initial_last_tokens: Vec<Token>,
}

impl SampleConfig {
    pub fn new(root: NodeKind, seed: u64) -> SampleConfig {
        SampleConfig {
            root,
            seed,
            max_expansions: 10_000,
            initial_scope: Vec::new(),
            initial_last_tokens: Vec::new(),
        }
    }
}

/// The next-expansion distribution at one point of the traversal: tuples of
/// the support (or, at a local identifier, single-token tuples over scope).
pub type NextDistribution = Vec<(TupleKey, f64)>;

/// Anything that can drive the generative traversal: a per-context
/// distribution over children tuples plus the scope-token path.
pub trait TreeScorer {
    fn support(&self) -> &SupportTable;
    fn uses_scope(&self) -> bool;
    fn latent(&self) -> Option<&LatentChain>;
    /// Probabilities over the parent's support, aligned to support order.
    fn tuple_probs(
        &self,
        parent: AnnotatedKind,
        ctx: &CtxSnapshot,
        latent: Option<usize>,
    ) -> Result<Vec<f64>>;
    /// Probabilities over the in-scope candidates.
    fn scope_probs(
        &self,
        ctx: &CtxSnapshot,
        candidates: &[VariableFeatureVector],
        latent: Option<usize>,
    ) -> Result<Vec<f64>>;
}

impl TreeScorer for LttModel {
    fn support(&self) -> &SupportTable {
        &self.support
    }

    fn uses_scope(&self) -> bool {
        self.variant.uses_scope()
    }

    fn latent(&self) -> Option<&LatentChain> {
        self.latent.as_ref()
    }

    fn tuple_probs(
        &self,
        parent: AnnotatedKind,
        ctx: &CtxSnapshot,
        latent: Option<usize>,
    ) -> Result<Vec<f64>> {
        let sup = self.support.support(&parent)?;
        let feats = crate::model::featurize(&self.params.slots, parent, ctx, latent, &self.params.vocab);
        let r_con = context_repr(&self.params, &feats);
        Ok(children_distribution(&self.params, &self.tuple_param_ids, sup, &r_con).probs())
    }

    fn scope_probs(
        &self,
        ctx: &CtxSnapshot,
        candidates: &[VariableFeatureVector],
        latent: Option<usize>,
    ) -> Result<Vec<f64>> {
        let parent = AnnotatedKind::tagged(NodeKind::IdentifierName, ScopeTag::Local);
        let feats = crate::model::featurize(&self.params.slots, parent, ctx, latent, &self.params.vocab);
        let r_con = context_repr(&self.params, &feats);
        let ids: Vec<_> = candidates
            .iter()
            .map(|v| scope_candidate_ids(v, &self.params.vocab))
            .collect();
        Ok(scope_token_distribution(&self.params, &ids, &r_con)?.probs())
    }
}

impl TreeScorer for PcfgModel {
    fn support(&self) -> &SupportTable {
        &self.support
    }

    fn uses_scope(&self) -> bool {
        false
    }

    fn latent(&self) -> Option<&LatentChain> {
        None
    }

    fn tuple_probs(
        &self,
        parent: AnnotatedKind,
        _ctx: &CtxSnapshot,
        _latent: Option<usize>,
    ) -> Result<Vec<f64>> {
        let sup = self.support.support(&parent)?;
        let denom = sup.total as f64 + self.count_alpha * sup.len() as f64;
        Ok(sup.counts.iter().map(|c| (*c as f64 + self.count_alpha) / denom).collect())
    }

    fn scope_probs(
        &self,
        _ctx: &CtxSnapshot,
        _candidates: &[VariableFeatureVector],
        _latent: Option<usize>,
    ) -> Result<Vec<f64>> {
        Err(Error::Model("tabular PCFG has no scope path".to_string()))
    }
}

struct ArenaNode {
    kind: NodeKind,
    children: Vec<ArenaChild>,
}

enum ArenaChild {
    Token(Token),
    Node(usize),
}

enum StackItem {
    Enter { arena: usize, kind: AnnotatedKind, child_index: usize },
    EmitToken(Token),
    Exit,
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Sample one tree by the stack-driven depth-first procedure: pop, expand
/// internal nodes from the (unsmoothed, renormalized) children
/// distribution, push children reversed so they pop left to right, update
/// traversal variables as nodes pop.
pub fn sample_tree<S: TreeScorer>(scorer: &S, cfg: &SampleConfig, rng: &mut ChaCha8Rng) -> Result<Tree> {
    let root_kind = annotated_root(scorer, cfg.root)?;
    let mut arena = vec![ArenaNode { kind: cfg.root, children: Vec::new() }];
    let mut stack = vec![StackItem::Enter { arena: 0, kind: root_kind, child_index: 0 }];

    let mut ctx = DeterministicContext::new();
    ctx.preload_tokens(&cfg.initial_last_tokens);
    let mut tracker = ScopeTracker::new();
    tracker.preload(&cfg.initial_scope);

    let mut expansions = 0usize;
    let mut latent_state: Option<usize> = None;

    while let Some(item) = stack.pop() {
        match item {
            StackItem::Enter { arena: idx, kind, child_index } => {
                expansions += 1;
                if expansions > cfg.max_expansions {
                    return Err(Error::ExpansionCap { cap: cfg.max_expansions });
                }
                let event = TraversalEvent::Descend { kind: kind.kind, child_index };
                ctx.update(&event)?;
                tracker.apply(&event);

                if let Some(chain) = scorer.latent() {
                    let probs = match latent_state {
                        None => chain.prior(),
                        Some(prev) => {
                            let t = chain.transitions();
                            t[prev * chain.k..(prev + 1) * chain.k].to_vec()
                        }
                    };
                    latent_state = Some(if chain.k == 1 { 0 } else { draw(&probs, rng) });
                }

                // The local identifier path; an empty scope renormalizes the
                // local/global choice to global.
                let effective = if kind.tag == Some(ScopeTag::Local) && tracker.scope().is_empty() {
                    AnnotatedKind::tagged(kind.kind, ScopeTag::Global)
                } else {
                    kind
                };

                let snapshot = ctx.snapshot();
                if effective.tag == Some(ScopeTag::Local) {
                    let candidates = tracker.scope().members();
                    let probs = scorer.scope_probs(&snapshot, &candidates, latent_state)?;
                    let pick = draw(&probs, rng);
                    let token = Token::ident(candidates[pick].identifier.clone());
                    arena[idx].children.push(ArenaChild::Token(token.clone()));
                    stack.push(StackItem::Exit);
                    stack.push(StackItem::EmitToken(token));
                } else {
                    let probs = scorer.tuple_probs(effective, &snapshot, latent_state)?;
                    let sup = scorer.support().support(&effective)?;
                    let pick = draw(&probs, rng);
                    let tuple = scorer.support().tuples.key(sup.tuples[pick]).clone();
                    let mut items = Vec::with_capacity(tuple.len());
                    for sym in &tuple {
                        match sym {
                            Symbol::Token(k, text) => {
                                let token = Token::new(text.clone(), *k);
                                arena[idx].children.push(ArenaChild::Token(token.clone()));
                                items.push(StackItem::EmitToken(token));
                            }
                            Symbol::Node(child_kind) => {
                                let child_arena = arena.len();
                                arena.push(ArenaNode { kind: child_kind.kind, children: Vec::new() });
                                arena[idx].children.push(ArenaChild::Node(child_arena));
                                let child_index = arena[idx].children.len() - 1;
                                items.push(StackItem::Enter {
                                    arena: child_arena,
                                    kind: *child_kind,
                                    child_index,
                                });
                            }
                        }
                    }
                    stack.push(StackItem::Exit);
                    for it in items.into_iter().rev() {
                        stack.push(it);
                    }
                }
            }
            StackItem::EmitToken(token) => {
                let event = TraversalEvent::EmitToken(&token);
                ctx.update(&event)?;
                tracker.apply(&event);
            }
            StackItem::Exit => {
                ctx.update(&TraversalEvent::Ascend)?;
                tracker.apply(&TraversalEvent::Ascend);
            }
        }
    }

    Ok(Tree::new(materialize(&arena, 0)))
}

/// Sample with retry on expansion-cap rejections, bumping a retry stream.
pub fn sample_tree_with_retry<S: TreeScorer>(
    scorer: &S,
    cfg: &SampleConfig,
    retries: usize,
) -> Result<Tree> {
    let mut last = None;
    for attempt in 0..=retries {
        let mut rng = rng_for(cfg.seed, 17, attempt as u64, 0);
        match sample_tree(scorer, cfg, &mut rng) {
            Ok(tree) => return Ok(tree),
            Err(e @ Error::ExpansionCap { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::ExpansionCap { cap: cfg.max_expansions }))
}

fn annotated_root<S: TreeScorer>(scorer: &S, root: NodeKind) -> Result<AnnotatedKind> {
    let plain = AnnotatedKind::plain(root);
    if scorer.support().parents.contains_key(&plain) {
        return Ok(plain);
    }
    if scorer.uses_scope() && root == NodeKind::IdentifierName {
        return Ok(AnnotatedKind::tagged(root, ScopeTag::Global));
    }
    Err(Error::Config(format!("root kind {root} absent from the support table")))
}

fn materialize(arena: &[ArenaNode], idx: usize) -> AstNode {
    AstNode::new(
        arena[idx].kind,
        arena[idx]
            .children
            .iter()
            .map(|c| match c {
                ArenaChild::Token(t) => Child::Token(t.clone()),
                ArenaChild::Node(i) => Child::Node(materialize(arena, *i)),
            })
            .collect(),
    )
}

/// The exact next-production distribution after the first `step` productions
/// of `tree` have been fixed. For latent variants the latent state is
/// forward-marginalized over the prefix.
pub fn conditional_prefix_distribution<S: TreeScorer>(
    scorer: &S,
    tree: &Tree,
    step: usize,
) -> Result<NextDistribution> {
    let records = extract_records(tree, scorer.uses_scope())?;
    let Some(rec) = records.get(step) else {
        return Err(Error::Structure {
            path: "prefix".to_string(),
            msg: format!("step {step} is beyond the tree's {} productions", records.len()),
        });
    };

    // Latent-state marginal given the prefix productions.
    let state_mix: Option<Vec<f64>> = match scorer.latent() {
        None => None,
        Some(chain) => {
            let k = chain.k;
            let tm = TransitionModel { k, prior: chain.prior(), trans: chain.transitions() };
            let mut mix = tm.prior.clone();
            if step > 0 {
                // Forward pass over the prefix: alpha_i up to step-1, then
                // one transition step.
                let mut emissions = Vec::with_capacity(step * k);
                for rec in &records[..step] {
                    for s in 0..k {
                        let sup = scorer.support().support(&rec.parent)?;
                        let probs = scorer.tuple_probs(rec.parent, &rec.ctx, Some(s))?;
                        let tuple_id = scorer
                            .support()
                            .tuples
                            .get(&rec.tuple)
                            .ok_or_else(|| Error::Model("prefix tuple outside support".into()))?;
                        let pos = sup
                            .position(tuple_id)
                            .ok_or_else(|| Error::Model("prefix tuple outside support".into()))?;
                        emissions.push(probs[pos].ln());
                    }
                }
                let (post, ll) = forward_backward(&emissions, step, &tm)?;
                if ll == f64::NEG_INFINITY {
                    return Err(Error::Model("prefix has zero probability".into()));
                }
                // P(h_step | prefix) = sum_p P(h_{step-1}=p | prefix) T(p -> s).
                let last = &post.unary[(step - 1) * k..step * k];
                let mut next = vec![0.0; k];
                for (p, lp) in last.iter().enumerate() {
                    for s in 0..k {
                        next[s] += lp * tm.trans[p * k + s];
                    }
                }
                mix = next;
            }
            Some(mix)
        }
    };

    let mix_probs = |per_state: Vec<Vec<f64>>| -> Vec<f64> {
        match &state_mix {
            None => per_state.into_iter().next().unwrap(),
            Some(mix) => {
                let n = per_state[0].len();
                let mut out = vec![0.0; n];
                for (s, probs) in per_state.iter().enumerate() {
                    for (i, p) in probs.iter().enumerate() {
                        out[i] += mix[s] * p;
                    }
                }
                out
            }
        }
    };

    if let Some(choice) = &rec.scope_choice {
        let states: Vec<usize> = match &state_mix {
            None => vec![0],
            Some(mix) => (0..mix.len()).collect(),
        };
        let per_state: Vec<Vec<f64>> = states
            .iter()
            .map(|s| {
                scorer.scope_probs(
                    &rec.ctx,
                    &choice.candidates,
                    state_mix.as_ref().map(|_| *s),
                )
            })
            .collect::<Result<_>>()?;
        let probs = mix_probs(per_state);
        return Ok(choice
            .candidates
            .iter()
            .zip(probs)
            .map(|(v, p)| {
                (vec![Symbol::Token(TokenKind::Identifier, v.identifier.clone())], p)
            })
            .collect());
    }

    let sup = scorer.support().support(&rec.parent)?;
    let states: Vec<usize> = match &state_mix {
        None => vec![0],
        Some(mix) => (0..mix.len()).collect(),
    };
    let per_state: Vec<Vec<f64>> = states
        .iter()
        .map(|s| scorer.tuple_probs(rec.parent, &rec.ctx, state_mix.as_ref().map(|_| *s)))
        .collect::<Result<_>>()?;
    let probs = mix_probs(per_state);
    Ok(sup
        .tuples
        .iter()
        .zip(probs)
        .map(|(tid, p)| (scorer.support().tuples.key(*tid).clone(), p))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::{parse, unparse};
    use crate::model::build_assets;
    use crate::train::{train_lbl_tree, TrainConfig};
    use crate::variant::Variant;

    fn trained_ltt0(srcs: &[&str]) -> LttModel {
        let trees: Vec<Tree> = srcs.iter().map(|s| parse(s).unwrap()).collect();
        let cfg = TrainConfig {
            variant: Variant::Ltt0,
            dim: 8,
            epochs: 5,
            patience: 0,
            ..TrainConfig::default()
        };
        train_lbl_tree(&trees, &trees, None, &cfg).unwrap()
    }

    #[test]
    fn singleton_grammar_is_deterministic() {
        // One program: every parent kind has singleton support, so sampling
        // can only reproduce that program.
        let src = "fn f ( ) { return 0 ; }";
        let model = trained_ltt0(&[src]);
        let cfg = SampleConfig::new(NodeKind::CompilationUnit, 3);
        let mut rng = rng_for(3, 17, 0, 0);
        let tree = sample_tree(&model, &cfg, &mut rng).unwrap();
        assert_eq!(unparse(&tree), src);
    }

    #[test]
    fn same_seed_same_output() {
        let model = trained_ltt0(&[
            "fn f() { return 0; }",
            "fn g() { return 1; }",
            "fn h(int a) { return a + 1; }",
        ]);
        let cfg = SampleConfig::new(NodeKind::CompilationUnit, 42);
        let a = sample_tree_with_retry(&model, &cfg, 5).unwrap();
        let b = sample_tree_with_retry(&model, &cfg, 5).unwrap();
        assert_eq!(unparse(&a), unparse(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn samples_reparse(){
        let model = trained_ltt0(&[
            "fn f() { int a = 0; a = a + 1; return a; }",
            "fn g(int x) { if (x < 2) { return x; } return 0; }",
            "fn h() { for (int i = 0; i < 4; ++i) { int y = i; } }",
        ]);
        for seed in 0..20 {
            let cfg = SampleConfig::new(NodeKind::CompilationUnit, seed);
            let tree = sample_tree_with_retry(&model, &cfg, 10).unwrap();
            let text = unparse(&tree);
            let reparsed = parse(&text).unwrap_or_else(|e| panic!("sample {text:?} failed: {e}"));
            assert_eq!(reparsed, tree);
        }
    }

    #[test]
    fn expansion_cap_rejects() {
        let model = trained_ltt0(&[
            "fn f() { int a = 0; a = a + 1; return a; }",
            "fn g(int x) { if (x < 2) { return x; } return 0; }",
        ]);
        let mut cfg = SampleConfig::new(NodeKind::CompilationUnit, 0);
        cfg.max_expansions = 1;
        let mut rng = rng_for(0, 17, 0, 0);
        assert!(matches!(
            sample_tree(&model, &cfg, &mut rng),
            Err(Error::ExpansionCap { cap: 1 })
        ));
    }

    #[test]
    fn prefix_distribution_sums_to_one_and_rescored_argmax_agrees() {
        let model = trained_ltt0(&[
            "fn f() { int a = 0; a = a + 1; return a; }",
            "fn g(int x) { if (x < 2) { return x; } return 0; }",
            "fn h() { for (int i = 0; i < 3; ++i) { int y = i; } }",
        ]);
        let held_out = parse("fn f() { int a = 0; return a; }").unwrap();
        let records = extract_records(&held_out, false).unwrap();
        for step in 0..records.len() {
            let dist = conditional_prefix_distribution(&model, &held_out, step).unwrap();
            let total: f64 = dist.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-9, "step {step} sums to {total}");
            // Rescoring oracle: recompute every tuple's probability directly
            // from the support energies and compare the argmax.
            let rec = &records[step];
            let probs = model.tuple_probs(rec.parent, &rec.ctx, None).unwrap();
            let sup = model.support.support(&rec.parent).unwrap();
            let best_direct = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| model.support.tuples.key(sup.tuples[i]).clone())
                .unwrap();
            let best_dist = dist
                .iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .map(|(t, _)| t.clone())
                .unwrap();
            assert_eq!(best_direct, best_dist);
        }
    }

    #[test]
    fn out_of_range_step_is_a_structural_error() {
        let model = trained_ltt0(&["fn f() { return 0; }"]);
        let tree = parse("fn f() { return 0; }").unwrap();
        assert!(matches!(
            conditional_prefix_distribution(&model, &tree, 999),
            Err(Error::Structure { .. })
        ));
    }

    #[test]
    fn tuple_frequencies_match_model_probabilities() {
        // Tiny two-tuple grammar; hand-set biases give P = (0.7, 0.3).
        use crate::ast::{AstNode, Child};
        let leaf = |t: &str| AstNode::new(NodeKind::Literal, vec![Child::Token(Token::new(t, TokenKind::IntLiteral))]);
        let t1 = Tree::new(leaf("0"));
        let t2 = Tree::new(leaf("1"));
        let records: Vec<_> = [&t1, &t2]
            .iter()
            .map(|t| extract_records(t, false).unwrap())
            .collect();
        let assets = build_assets(&records, &[t1.clone(), t2.clone()], false).unwrap();
        let token_universe: Vec<(TokenKind, String)> =
            assets.default_model.token_counts.keys().cloned().collect();
        let vocab = crate::train::build_tree_vocab(&records, &assets.support, &token_universe, false, None);
        let mut params = crate::model::ParamStore::zeroed(vocab, Variant::Ltt0.context_slots(), 2);
        let tuple_pids = crate::train::tuple_param_ids(&params.vocab, &assets.support.tuples);
        // Support order: tuple of "0" first, tuple of "1" second.
        params.b[tuple_pids[0] as usize] = 0.7f64.ln();
        params.b[tuple_pids[1] as usize] = 0.3f64.ln();
        let model = LttModel {
            variant: Variant::Ltt0,
            params,
            support: assets.support,
            default_model: assets.default_model,
            smoothing: Default::default(),
            latent: None,
            tuple_param_ids: tuple_pids,
        };
        let n = 10_000usize;
        let mut hits = 0usize;
        let cfg = SampleConfig::new(NodeKind::Literal, 5);
        for i in 0..n {
            let mut rng = rng_for(5, 99, i as u64, 0);
            let tree = sample_tree(&model, &cfg, &mut rng).unwrap();
            if unparse(&tree) == "0" {
                hits += 1;
            }
        }
        let p = 0.7f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let freq = hits as f64 / n as f64;
        assert!(
            (freq - p).abs() < 3.0 * sigma,
            "frequency {freq} vs probability {p} (sigma {sigma})"
        );
    }
}
