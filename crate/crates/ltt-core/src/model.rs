//! The log-bilinear production model: embedding tables, support tables, the
//! children and scope-token distributions, and the smoothed mixture with the
//! default children model.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ast::{AnnotatedKind, NodeKind, ScopeTag, Symbol, TokenKind, Tree, TupleKey};
use crate::error::{Error, Result};
use crate::trace::{
    CtxSnapshot, ProductionRecord, VariableFeatureVector, CHILD_INDEX_CAP, DEPTH_CAP, RANK_CAP,
    SCOPE_FEATURES,
};
use crate::variant::{SlotKind, Variant};

/// Everything the embedding table can be indexed with. Distinct objects get
/// distinct rows; the same object used in different positions shares its row
/// and is modulated by the position's diagonal matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RKey {
    /// A (possibly annotated) node kind.
    Kind(AnnotatedKind),
    /// A token object; identifier scope features share these rows.
    Token(TokenKind, String),
    /// A whole children tuple, by id into the tuple table.
    Tuple(u32),
    /// Capped depth bucket.
    Depth(u8),
    /// Ancestor pair (kind, capped child index).
    Ancestor(NodeKind, u8),
    /// Declared-type scope feature, e.g. ("type", "int").
    TypeFeat(String),
    /// Declaration-recency rank scope feature.
    DeclRank(u8),
    /// Assignment-recency rank scope feature.
    AssignRank(u8),
    /// Discrete latent traversal state.
    Latent(u16),
    /// Start-of-sequence padding for token-sequence models.
    StartPad,
    /// End-of-sequence candidate for token-sequence models.
    Stop,
}

/// Object-to-id table; insertion order is id order and is preserved in model
/// files.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    keys: IndexMap<RKey, u32>,
}

impl Vocab {
    pub fn new() -> Vocab {
        Vocab::default()
    }

    pub fn intern(&mut self, key: RKey) -> u32 {
        let next = self.keys.len() as u32;
        *self.keys.entry(key).or_insert(next)
    }

    pub fn get(&self, key: &RKey) -> Option<u32> {
        self.keys.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, id: u32) -> &RKey {
        self.keys.get_index(id as usize).expect("param id in range").0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RKey, u32)> {
        self.keys.iter().map(|(k, v)| (k, *v))
    }
}

/// Children-tuple interning; same tuple under different parents shares one
/// id (and therefore one embedding row).
#[derive(Debug, Clone, Default)]
pub struct TupleTable {
    tuples: IndexMap<TupleKey, u32>,
}

impl TupleTable {
    pub fn intern(&mut self, tuple: TupleKey) -> u32 {
        let next = self.tuples.len() as u32;
        *self.tuples.entry(tuple).or_insert(next)
    }

    pub fn get(&self, tuple: &TupleKey) -> Option<u32> {
        self.tuples.get(tuple).copied()
    }

    pub fn key(&self, id: u32) -> &TupleKey {
        self.tuples.get_index(id as usize).expect("tuple id in range").0
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TupleKey, u32)> {
        self.tuples.iter().map(|(k, v)| (k, *v))
    }
}

/// Observed children tuples of one parent kind, in first-occurrence order.
#[derive(Debug, Clone)]
pub struct ParentSupport {
    pub tuples: Vec<u32>,
    pub counts: Vec<u64>,
    pub total: u64,
    /// Every observed tuple is a single token child.
    pub token_only: bool,
    /// Mean observed tuple length; the Poisson rate of the default model.
    pub lambda: f64,
    pub(crate) lookup: HashMap<u32, u32>,
}

impl ParentSupport {
    pub fn position(&self, tuple_id: u32) -> Option<usize> {
        self.lookup.get(&tuple_id).map(|p| *p as usize)
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// Map from (annotated) parent kind to its support set.
#[derive(Debug, Clone, Default)]
pub struct SupportTable {
    pub parents: IndexMap<AnnotatedKind, ParentSupport>,
    pub tuples: TupleTable,
}

impl SupportTable {
    pub fn support(&self, parent: &AnnotatedKind) -> Result<&ParentSupport> {
        match self.parents.get(parent) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::Model(format!(
                "no support for parent kind {parent}; fall back to the default model"
            ))),
        }
    }
}

/// The broad-support fallback mixed in with weight 1 - pi: an additively
/// smoothed token distribution for token-only parents, otherwise a Poisson
/// length times independent smoothed symbol draws.
#[derive(Debug, Clone, Default)]
pub struct DefaultModel {
    pub token_counts: IndexMap<(TokenKind, String), u64>,
    pub token_total: u64,
    pub symbol_counts: IndexMap<Symbol, u64>,
    pub symbol_total: u64,
}

impl DefaultModel {
    pub fn token_universe(&self) -> usize {
        self.token_counts.len()
    }

    pub fn knows_token(&self, kind: TokenKind, text: &str) -> bool {
        self.token_counts.contains_key(&(kind, text.to_string()))
    }

    pub fn token_prob(&self, kind: TokenKind, text: &str, alpha: f64) -> f64 {
        let count = self
            .token_counts
            .get(&(kind, text.to_string()))
            .copied()
            .unwrap_or(0);
        let v = self.token_counts.len() as f64;
        (count as f64 + alpha) / (self.token_total as f64 + alpha * v)
    }

    pub fn symbol_prob(&self, sym: &Symbol, alpha: f64) -> f64 {
        let count = self.symbol_counts.get(sym).copied().unwrap_or(0);
        let v = self.symbol_counts.len() as f64;
        (count as f64 + alpha) / (self.symbol_total as f64 + alpha * v)
    }
}

/// Build the support table and default-model statistics from training
/// records, closing the token and symbol universes over `universe_trees`
/// (normally the full pre-split corpus, mirroring an a-priori-known token
/// set).
pub fn build_assets(
    train_records: &[Vec<ProductionRecord>],
    universe_trees: &[Tree],
    with_scope: bool,
) -> Result<ModelAssets> {
    if train_records.is_empty() {
        return Err(Error::Config("empty training corpus".to_string()));
    }

    let mut support = SupportTable::default();
    let mut default_model = DefaultModel::default();

    // Universe tokens, in first-occurrence order over the universe corpus.
    for tree in universe_trees {
        for tok in tree.tokens() {
            default_model
                .token_counts
                .entry((tok.kind, tok.text.clone()))
                .or_insert(0);
        }
    }
    // Symbol universe: all node kinds (annotated forms when scoping), plus
    // every universe token.
    for kind in NodeKind::ALL {
        if with_scope && *kind == NodeKind::IdentifierName {
            default_model
                .symbol_counts
                .entry(Symbol::Node(AnnotatedKind::tagged(*kind, ScopeTag::Local)))
                .or_insert(0);
            default_model
                .symbol_counts
                .entry(Symbol::Node(AnnotatedKind::tagged(*kind, ScopeTag::Global)))
                .or_insert(0);
        } else {
            default_model
                .symbol_counts
                .entry(Symbol::Node(AnnotatedKind::plain(*kind)))
                .or_insert(0);
        }
    }
    let token_keys: Vec<(TokenKind, String)> = default_model.token_counts.keys().cloned().collect();
    for (kind, text) in &token_keys {
        default_model
            .symbol_counts
            .entry(Symbol::Token(*kind, text.clone()))
            .or_insert(0);
    }

    struct Accum {
        tuples: Vec<u32>,
        counts: Vec<u64>,
        lookup: HashMap<u32, u32>,
        total: u64,
        length_sum: u64,
        all_single_token: bool,
    }
    let mut accum: IndexMap<AnnotatedKind, Accum> = IndexMap::new();

    for records in train_records {
        for rec in records {
            let tuple_id = support.tuples.intern(rec.tuple.clone());
            let entry = accum.entry(rec.parent).or_insert_with(|| Accum {
                tuples: Vec::new(),
                counts: Vec::new(),
                lookup: HashMap::new(),
                total: 0,
                length_sum: 0,
                all_single_token: true,
            });
            match entry.lookup.get(&tuple_id) {
                Some(pos) => entry.counts[*pos as usize] += 1,
                None => {
                    entry.lookup.insert(tuple_id, entry.tuples.len() as u32);
                    entry.tuples.push(tuple_id);
                    entry.counts.push(1);
                }
            }
            entry.total += 1;
            entry.length_sum += rec.tuple.len() as u64;
            if !(rec.tuple.len() == 1 && rec.tuple[0].is_token()) {
                entry.all_single_token = false;
            }
            // Default-model counts come from the training split only.
            for sym in &rec.tuple {
                *default_model.symbol_counts.entry(sym.clone()).or_insert(0) += 1;
                default_model.symbol_total += 1;
                if let Symbol::Token(kind, text) = sym {
                    *default_model
                        .token_counts
                        .entry((*kind, text.clone()))
                        .or_insert(0) += 1;
                    default_model.token_total += 1;
                }
            }
        }
    }

    // The global identifier model gives support to every identifier token in
    // the universe, not just those observed under it in training.
    let global_ident = AnnotatedKind::tagged(NodeKind::IdentifierName, ScopeTag::Global);
    if with_scope {
        let ident_tuples: Vec<u32> = token_keys
            .iter()
            .filter(|(kind, _)| *kind == TokenKind::Identifier)
            .map(|(kind, text)| support.tuples.intern(vec![Symbol::Token(*kind, text.clone())]))
            .collect();
        let entry = accum.entry(global_ident).or_insert_with(|| Accum {
            tuples: Vec::new(),
            counts: Vec::new(),
            lookup: HashMap::new(),
            total: 0,
            length_sum: 0,
            all_single_token: true,
        });
        for tuple_id in ident_tuples {
            if !entry.lookup.contains_key(&tuple_id) {
                entry.lookup.insert(tuple_id, entry.tuples.len() as u32);
                entry.tuples.push(tuple_id);
                entry.counts.push(0);
            }
        }
    }

    for (parent, acc) in accum {
        let lambda = if acc.total > 0 {
            acc.length_sum as f64 / acc.total as f64
        } else {
            1.0
        };
        support.parents.insert(
            parent,
            ParentSupport {
                tuples: acc.tuples,
                counts: acc.counts,
                total: acc.total,
                token_only: acc.all_single_token,
                lambda,
                lookup: acc.lookup,
            },
        );
    }

    Ok(ModelAssets { support, default_model })
}

#[derive(Debug)]
pub struct ModelAssets {
    pub support: SupportTable,
    pub default_model: DefaultModel,
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Embedding table, biases and the diagonal modulation matrices.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub dim: usize,
    pub vocab: Vocab,
    pub slots: Vec<SlotKind>,
    /// vocab.len() x dim, row-major.
    pub r: Vec<f64>,
    pub b: Vec<f64>,
    /// slots.len() x dim diagonals.
    pub wcon: Vec<f64>,
    /// SCOPE_FEATURES x dim diagonals for the scope-candidate side.
    pub wch: Vec<f64>,
}

impl ParamStore {
    /// Small symmetric init for embeddings and biases; diagonals start at 1.
    pub fn init(vocab: Vocab, slots: Vec<SlotKind>, dim: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = vocab.len();
        let r = (0..n * dim).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let b = (0..n).map(|_| rng.gen_range(-0.01..0.01)).collect();
        ParamStore {
            dim,
            vocab,
            wcon: vec![1.0; slots.len() * dim],
            slots,
            r,
            b,
            wch: vec![1.0; SCOPE_FEATURES * dim],
        }
    }

    pub fn zeroed(vocab: Vocab, slots: Vec<SlotKind>, dim: usize) -> ParamStore {
        let n = vocab.len();
        ParamStore {
            dim,
            vocab,
            wcon: vec![1.0; slots.len() * dim],
            slots,
            r: vec![0.0; n * dim],
            b: vec![0.0; n],
            wch: vec![1.0; SCOPE_FEATURES * dim],
        }
    }

    #[inline]
    pub fn r_row(&self, id: u32) -> &[f64] {
        let d = self.dim;
        &self.r[id as usize * d..(id as usize + 1) * d]
    }

    #[inline]
    pub fn wcon_row(&self, slot: usize) -> &[f64] {
        let d = self.dim;
        &self.wcon[slot * d..(slot + 1) * d]
    }

    #[inline]
    pub fn wch_row(&self, u: usize) -> &[f64] {
        let d = self.dim;
        &self.wch[u * d..(u + 1) * d]
    }

    /// Cosine nearest neighbours among keys of the same discriminant.
    pub fn nearest_neighbors(&self, key: &RKey, top: usize) -> Vec<(RKey, f64)> {
        let Some(id) = self.vocab.get(key) else { return Vec::new() };
        let base = self.r_row(id);
        let base_norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut scored: Vec<(RKey, f64)> = self
            .vocab
            .iter()
            .filter(|(k, other)| *other != id && std::mem::discriminant(*k) == std::mem::discriminant(key))
            .map(|(k, other)| {
                let row = self.r_row(other);
                let dot: f64 = row.iter().zip(base).map(|(a, b)| a * b).sum();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let cos = if base_norm > 0.0 && norm > 0.0 { dot / (base_norm * norm) } else { 0.0 };
                (k.clone(), cos)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        scored.truncate(top);
        scored
    }
}

// ---------------------------------------------------------------------------
// Featurization
// ---------------------------------------------------------------------------

/// Resolved context features: (slot index, param id) pairs. Objects unseen
/// in training resolve to nothing and contribute exactly zero.
pub fn featurize(
    slots: &[SlotKind],
    parent: AnnotatedKind,
    ctx: &CtxSnapshot,
    latent: Option<usize>,
    vocab: &Vocab,
) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(slots.len());
    for (i, slot) in slots.iter().enumerate() {
        let key = match slot {
            SlotKind::Parent => Some(RKey::Kind(parent)),
            SlotKind::Depth => Some(RKey::Depth(ctx.depth.min(DEPTH_CAP) as u8)),
            SlotKind::ParentKind => ctx.parent_kind.map(|k| RKey::Kind(AnnotatedKind::plain(k))),
            SlotKind::Ancestor(j) => {
                let n = ctx.ancestors.len();
                if *j < n {
                    let (kind, idx) = ctx.ancestors[n - 1 - j];
                    Some(RKey::Ancestor(kind, idx.min(CHILD_INDEX_CAP) as u8))
                } else {
                    None
                }
            }
            SlotKind::LastToken(j) => {
                let n = ctx.last_tokens.len();
                if *j < n {
                    let (kind, text) = &ctx.last_tokens[n - 1 - j];
                    Some(RKey::Token(*kind, text.clone()))
                } else {
                    None
                }
            }
            SlotKind::Latent => latent.map(|k| RKey::Latent(k as u16)),
            SlotKind::PrevToken(_) => None,
        };
        if let Some(key) = key {
            if let Some(id) = vocab.get(&key) {
                out.push((i as u32, id));
            }
        }
    }
    out
}

/// Scope-candidate feature keys: identifier (shared with the token object),
/// declared type, and the two capped recency ranks.
pub fn scope_candidate_ids(
    v: &VariableFeatureVector,
    vocab: &Vocab,
) -> [Option<u32>; SCOPE_FEATURES] {
    [
        vocab.get(&RKey::Token(TokenKind::Identifier, v.identifier.clone())),
        vocab.get(&RKey::TypeFeat(v.declared_type.clone())),
        vocab.get(&RKey::DeclRank(v.decl_rank.min(RANK_CAP) as u8)),
        vocab.get(&RKey::AssignRank(v.assign_rank.min(RANK_CAP) as u8)),
    ]
}

/// The context representation of Eq-style log-bilinear models: the sum of
/// slot-modulated embeddings of the resolved features.
pub fn context_repr(params: &ParamStore, feats: &[(u32, u32)]) -> Vec<f64> {
    let d = params.dim;
    let mut v = vec![0.0; d];
    for (slot, id) in feats {
        let w = params.wcon_row(*slot as usize);
        let r = params.r_row(*id);
        for k in 0..d {
            v[k] += w[k] * r[k];
        }
    }
    v
}

/// A conditional distribution over an ordered candidate list, in natural
/// log space.
#[derive(Debug, Clone)]
pub struct Distribution {
    pub log_probs: Vec<f64>,
}

impl Distribution {
    pub fn prob(&self, i: usize) -> f64 {
        self.log_probs[i].exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }
}

pub fn log_softmax(energies: &[f64]) -> Vec<f64> {
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // Degenerate: no finite energy.
        return vec![f64::NEG_INFINITY; energies.len()];
    }
    let log_z = max
        + energies
            .iter()
            .map(|e| (e - max).exp())
            .sum::<f64>()
            .ln();
    energies.iter().map(|e| e - log_z).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Negative energies of every support tuple given a context representation.
pub fn support_energies(
    params: &ParamStore,
    tuple_param_ids: &[u32],
    support: &ParentSupport,
    r_con: &[f64],
) -> Vec<f64> {
    support
        .tuples
        .iter()
        .map(|tid| {
            let pid = tuple_param_ids[*tid as usize];
            let row = params.r_row(pid);
            let dot: f64 = row.iter().zip(r_con).map(|(a, b)| a * b).sum();
            dot + params.b[pid as usize]
        })
        .collect()
}

/// P(C | n, h) over the parent's support, exponentiated and normalized with
/// max-subtraction.
pub fn children_distribution(
    params: &ParamStore,
    tuple_param_ids: &[u32],
    support: &ParentSupport,
    r_con: &[f64],
) -> Distribution {
    Distribution { log_probs: log_softmax(&support_energies(params, tuple_param_ids, support, r_con)) }
}

/// Candidate-side representation of one in-scope variable.
pub fn scope_candidate_energy(
    params: &ParamStore,
    ids: &[Option<u32>; SCOPE_FEATURES],
    r_con: &[f64],
) -> f64 {
    let d = params.dim;
    let mut energy = 0.0;
    for (u, id) in ids.iter().enumerate() {
        if let Some(id) = id {
            let w = params.wch_row(u);
            let row = params.r_row(*id);
            let mut dot = 0.0;
            for k in 0..d {
                dot += w[k] * row[k] * r_con[k];
            }
            energy += dot + params.b[*id as usize];
        }
    }
    energy
}

/// P(token | scope), normalized over the variables currently in scope.
pub fn scope_token_distribution(
    params: &ParamStore,
    candidates: &[[Option<u32>; SCOPE_FEATURES]],
    r_con: &[f64],
) -> Result<Distribution> {
    if candidates.is_empty() {
        return Err(Error::Model(
            "scope distribution requested with an empty scope".to_string(),
        ));
    }
    let energies: Vec<f64> = candidates
        .iter()
        .map(|ids| scope_candidate_energy(params, ids, r_con))
        .collect();
    Ok(Distribution { log_probs: log_softmax(&energies) })
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

pub fn poisson_ln(lambda: f64, len: usize) -> f64 {
    -lambda + len as f64 * lambda.ln() - ln_factorial(len)
}

/// The default (broad-support) probability of a tuple under a parent kind.
pub fn default_children_prob(
    support: &SupportTable,
    default_model: &DefaultModel,
    parent: &AnnotatedKind,
    tuple: &[Symbol],
    alpha: f64,
) -> f64 {
    let parent_support = support.parents.get(parent);
    let token_only = parent_support.map(|s| s.token_only).unwrap_or(false);
    if token_only && tuple.len() == 1 {
        if let Symbol::Token(kind, text) = &tuple[0] {
            return default_model.token_prob(*kind, text, alpha);
        }
    }
    let lambda = parent_support.map(|s| s.lambda).unwrap_or(1.0);
    let mut ln_p = poisson_ln(lambda, tuple.len());
    for sym in tuple {
        ln_p += default_model.symbol_prob(sym, alpha).ln();
    }
    ln_p.exp()
}

/// pi-mixture of a base probability (0 when out of support) with the
/// default model.
pub fn smoothed_prob(base: Option<f64>, default_prob: f64, pi: f64) -> f64 {
    pi * base.unwrap_or(0.0) + (1.0 - pi) * default_prob
}

// ---------------------------------------------------------------------------
// Assembled models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// Mixture weight on the base model.
    pub pi: f64,
    /// Additive smoothing of the default model's token/symbol draws.
    pub alpha: f64,
}

impl Default for SmoothingConfig {
    fn default() -> SmoothingConfig {
        SmoothingConfig { pi: 0.98, alpha: 0.2 }
    }
}

/// Tabular latent chain: row-softmax logits for the transitions plus prior
/// logits over the state at the first production.
#[derive(Debug, Clone)]
pub struct LatentChain {
    pub k: usize,
    pub trans_logits: Vec<f64>,
    pub prior_logits: Vec<f64>,
}

impl LatentChain {
    pub fn new(k: usize) -> LatentChain {
        LatentChain { k, trans_logits: vec![0.0; k * k], prior_logits: vec![0.0; k] }
    }

    pub fn prior(&self) -> Vec<f64> {
        log_softmax(&self.prior_logits).iter().map(|lp| lp.exp()).collect()
    }

    pub fn transitions(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k * self.k];
        for row in 0..self.k {
            let lp = log_softmax(&self.trans_logits[row * self.k..(row + 1) * self.k]);
            for (j, v) in lp.iter().enumerate() {
                out[row * self.k + j] = v.exp();
            }
        }
        out
    }
}

/// A trained log-bilinear tree-traversal model.
#[derive(Debug, Clone)]
pub struct LttModel {
    pub variant: Variant,
    pub params: ParamStore,
    pub support: SupportTable,
    pub default_model: DefaultModel,
    pub smoothing: SmoothingConfig,
    pub latent: Option<LatentChain>,
    /// tuple id -> param id of its embedding row.
    pub tuple_param_ids: Vec<u32>,
}

impl LttModel {
    /// Resolved context features for one production.
    pub fn featurize_record(&self, rec: &ProductionRecord, latent: Option<usize>) -> Vec<(u32, u32)> {
        featurize(&self.params.slots, rec.parent, &rec.ctx, latent, &self.params.vocab)
    }

    /// Natural-log base-model probability of the recorded expansion, or
    /// None when the tuple is outside the support.
    pub fn base_log_prob(&self, rec: &ProductionRecord, latent: Option<usize>) -> Result<Option<f64>> {
        let feats = self.featurize_record(rec, latent);
        let r_con = context_repr(&self.params, &feats);
        if let Some(choice) = &rec.scope_choice {
            let ids: Vec<[Option<u32>; SCOPE_FEATURES]> = choice
                .candidates
                .iter()
                .map(|v| scope_candidate_ids(v, &self.params.vocab))
                .collect();
            let dist = scope_token_distribution(&self.params, &ids, &r_con)?;
            return Ok(Some(dist.log_probs[choice.target]));
        }
        let support = self.support.support(&rec.parent)?;
        let Some(tuple_id) = self.support.tuples.get(&rec.tuple) else {
            return Ok(None);
        };
        let Some(pos) = support.position(tuple_id) else {
            return Ok(None);
        };
        let dist = children_distribution(&self.params, &self.tuple_param_ids, support, &r_con);
        Ok(Some(dist.log_probs[pos]))
    }

    /// Natural-log smoothed probability: pi * base + (1 - pi) * default.
    pub fn smoothed_log_prob(&self, rec: &ProductionRecord, latent: Option<usize>) -> Result<f64> {
        let base = self.base_log_prob(rec, latent)?.map(f64::exp);
        let def = default_children_prob(
            &self.support,
            &self.default_model,
            &rec.parent,
            &rec.tuple,
            self.smoothing.alpha,
        );
        let p = smoothed_prob(base, def, self.smoothing.pi);
        if !(p > 0.0) {
            return Err(Error::Numeric(format!(
                "non-positive smoothed probability at step {} under {}",
                rec.step, rec.parent
            )));
        }
        Ok(p.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab(keys: &[RKey]) -> Vocab {
        let mut v = Vocab::new();
        for k in keys {
            v.intern(k.clone());
        }
        v
    }

    #[test]
    fn context_repr_zero_params_is_zero() {
        let vocab = tiny_vocab(&[RKey::Kind(AnnotatedKind::plain(NodeKind::Block))]);
        let params = ParamStore::zeroed(vocab, vec![SlotKind::Parent], 3);
        let feats = vec![(0u32, 0u32)];
        assert_eq!(context_repr(&params, &feats), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn context_repr_scalar_example() {
        // D=1: R[parent]=2 with W0=0.5, one feature with R=1 and W1=1 -> 2.0
        let vocab = tiny_vocab(&[
            RKey::Kind(AnnotatedKind::plain(NodeKind::Block)),
            RKey::Depth(3),
        ]);
        let mut params = ParamStore::zeroed(vocab, vec![SlotKind::Parent, SlotKind::Depth], 1);
        params.r[0] = 2.0;
        params.r[1] = 1.0;
        params.wcon[0] = 0.5;
        params.wcon[1] = 1.0;
        let feats = vec![(0u32, 0u32), (1u32, 1u32)];
        let v = context_repr(&params, &feats);
        assert!((v[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn context_repr_matches_naive_loop() {
        // Ten ancestor slots plus parent, D=4; compare with a naive oracle.
        let mut keys = vec![RKey::Kind(AnnotatedKind::plain(NodeKind::ForStatement))];
        for j in 0..10u8 {
            keys.push(RKey::Ancestor(NodeKind::Block, j));
        }
        let vocab = tiny_vocab(&keys);
        let mut slots = vec![SlotKind::Parent];
        for j in 0..10 {
            slots.push(SlotKind::Ancestor(j));
        }
        let params = ParamStore::init(vocab, slots, 4, 11);
        let feats: Vec<(u32, u32)> = (0..11).map(|i| (i as u32, i as u32)).collect();
        let got = context_repr(&params, &feats);
        let mut want = vec![0.0; 4];
        for (slot, id) in &feats {
            for k in 0..4 {
                want[k] +=
                    params.wcon[*slot as usize * 4 + k] * params.r[*id as usize * 4 + k];
            }
        }
        for k in 0..4 {
            assert!((got[k] - want[k]).abs() < 1e-12);
        }
    }

    fn support_of(tuples: &[TupleKey]) -> (SupportTable, ParentSupport) {
        let mut table = SupportTable::default();
        let mut sup = ParentSupport {
            tuples: Vec::new(),
            counts: Vec::new(),
            total: 0,
            token_only: false,
            lambda: 1.0,
            lookup: HashMap::new(),
        };
        for t in tuples {
            let id = table.tuples.intern(t.clone());
            sup.lookup.insert(id, sup.tuples.len() as u32);
            sup.tuples.push(id);
            sup.counts.push(1);
            sup.total += 1;
        }
        (table, sup)
    }

    #[test]
    fn singleton_support_is_point_mass() {
        let tuple = vec![Symbol::Token(TokenKind::Punctuation, ";".into())];
        let (_table, sup) = support_of(&[tuple.clone()]);
        let vocab = tiny_vocab(&[RKey::Tuple(0)]);
        let params = ParamStore::zeroed(vocab, vec![SlotKind::Parent], 2);
        let dist = children_distribution(&params, &[0], &sup, &[0.0, 0.0]);
        assert!((dist.prob(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_params_are_uniform() {
        let tuples: Vec<TupleKey> = (0..3)
            .map(|i| vec![Symbol::Token(TokenKind::IntLiteral, format!("{i}"))])
            .collect();
        let (_table, sup) = support_of(&tuples);
        let vocab = tiny_vocab(&[RKey::Tuple(0), RKey::Tuple(1), RKey::Tuple(2)]);
        let params = ParamStore::zeroed(vocab, vec![SlotKind::Parent], 2);
        let dist = children_distribution(&params, &[0, 1, 2], &sup, &[0.0, 0.0]);
        for i in 0..3 {
            assert!((dist.prob(i) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_two_energies() {
        // Negative energies (0.5, -0.5) -> (0.7311, 0.2689)
        let lp = log_softmax(&[0.5, -0.5]);
        assert!((lp[0].exp() - 0.7311).abs() < 1e-4);
        assert!((lp[1].exp() - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn scope_distribution_trivial_cases() {
        let vocab = tiny_vocab(&[
            RKey::Token(TokenKind::Identifier, "i".into()),
            RKey::Token(TokenKind::Identifier, "j".into()),
            RKey::TypeFeat("int".into()),
            RKey::DeclRank(0),
            RKey::AssignRank(0),
        ]);
        let params = ParamStore::zeroed(vocab, vec![SlotKind::Parent], 2);
        let one = vec![[Some(0), Some(2), Some(3), Some(4)]];
        let dist = scope_token_distribution(&params, &one, &[0.0, 0.0]).unwrap();
        assert!((dist.prob(0) - 1.0).abs() < 1e-12);

        // Two candidates identical except the identifier, zero params: 1/2.
        let two = vec![
            [Some(0), Some(2), Some(3), Some(4)],
            [Some(1), Some(2), Some(3), Some(4)],
        ];
        let dist = scope_token_distribution(&params, &two, &[0.0, 0.0]).unwrap();
        assert!((dist.prob(0) - 0.5).abs() < 1e-12);
        assert!((dist.prob(1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scope_distribution_hand_computed() {
        // V=4, D=1, hand-set parameters; softmax of two hand-computed scores.
        let vocab = tiny_vocab(&[
            RKey::Token(TokenKind::Identifier, "i".into()),
            RKey::Token(TokenKind::Identifier, "j".into()),
            RKey::TypeFeat("int".into()),
            RKey::DeclRank(0),
            RKey::DeclRank(1),
        ]);
        let mut params = ParamStore::zeroed(vocab, vec![SlotKind::Parent], 1);
        params.r = vec![0.3, -0.2, 0.5, 0.1, 0.4];
        params.b = vec![0.05, -0.05, 0.0, 0.02, -0.01];
        params.wch = vec![1.0, 0.5, 2.0, 1.5];
        let r_con = vec![0.7];
        let cands = vec![
            [Some(0), Some(2), Some(3), None],
            [Some(1), Some(2), Some(4), None],
        ];
        let s0 = 1.0 * 0.3 * 0.7 + 0.05 + 0.5 * 0.5 * 0.7 + 0.0 + 2.0 * 0.1 * 0.7 + 0.02;
        let s1 = 1.0 * (-0.2) * 0.7 + (-0.05) + 0.5 * 0.5 * 0.7 + 0.0 + 2.0 * 0.4 * 0.7 + (-0.01);
        let want = log_softmax(&[s0, s1]);
        let dist = scope_token_distribution(&params, &cands, &r_con).unwrap();
        assert!((dist.log_probs[0] - want[0]).abs() < 1e-12);
        assert!((dist.log_probs[1] - want[1]).abs() < 1e-12);
    }

    fn default_model_fixture() -> DefaultModel {
        let mut dm = DefaultModel::default();
        for (text, count) in [("a", 6u64), ("b", 3), ("c", 1)] {
            dm.token_counts.insert((TokenKind::Identifier, text.into()), count);
            dm.token_total += count;
            dm.symbol_counts.insert(Symbol::Token(TokenKind::Identifier, text.into()), count);
            dm.symbol_total += count;
        }
        dm
    }

    #[test]
    fn huge_alpha_tends_to_uniform() {
        let dm = default_model_fixture();
        let p = dm.token_prob(TokenKind::Identifier, "c", 1e12);
        assert!((p - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn poisson_default_formula() {
        // lambda = 2, tuple length 2: e^-2 * 2^2 / 2! * p1 * p2
        let dm = default_model_fixture();
        let mut table = SupportTable::default();
        let parent = AnnotatedKind::plain(NodeKind::Block);
        table.parents.insert(
            parent,
            ParentSupport {
                tuples: vec![],
                counts: vec![],
                total: 0,
                token_only: false,
                lambda: 2.0,
                lookup: HashMap::new(),
            },
        );
        let tuple = vec![
            Symbol::Token(TokenKind::Identifier, "a".into()),
            Symbol::Token(TokenKind::Identifier, "b".into()),
        ];
        let alpha = 0.5;
        let p1 = dm.symbol_prob(&tuple[0], alpha);
        let p2 = dm.symbol_prob(&tuple[1], alpha);
        let want = (-2.0f64).exp() * 2.0f64.powi(2) / 2.0 * p1 * p2;
        let got = default_children_prob(&table, &dm, &parent, &tuple, alpha);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn unseen_tuple_gets_positive_default_probability() {
        let dm = default_model_fixture();
        let table = SupportTable::default();
        // A length-3 combination of known symbols that no support contains.
        let tuple = vec![
            Symbol::Token(TokenKind::Identifier, "a".into()),
            Symbol::Token(TokenKind::Identifier, "c".into()),
            Symbol::Token(TokenKind::Identifier, "a".into()),
        ];
        let p = default_children_prob(&table, &dm, &AnnotatedKind::plain(NodeKind::IfStatement), &tuple, 0.5);
        assert!(p > 0.0);
    }

    #[test]
    fn smoothed_prob_mixture() {
        assert!((smoothed_prob(Some(0.5), 0.01, 1.0) - 0.5).abs() < 1e-12);
        assert!((smoothed_prob(Some(0.5), 0.01, 0.0) - 0.01).abs() < 1e-12);
        assert!((smoothed_prob(Some(0.5), 0.01, 0.9) - 0.451).abs() < 1e-12);
        assert!((smoothed_prob(None, 0.01, 0.9) - 0.001).abs() < 1e-15);
    }
}
