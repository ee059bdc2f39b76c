//! Comparison models: additively smoothed n-grams, the tabular PCFG, the
//! log-bilinear n-gram and the log-bilinear HMM.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::ast::{TokenKind, Tree};
use crate::error::{Error, Result};
use crate::model::{
    build_assets, context_repr, default_children_prob, log_softmax, smoothed_prob, DefaultModel,
    Distribution, LatentChain, ParamStore, RKey, SmoothingConfig, SupportTable, Vocab,
};
use crate::train::{
    adagrad_apply, backprop_context, forward_backward, forward_increments, rng_for,
    sample_categorical, shuffle, AdaGradState, GradBuf, TrainConfig, TransitionModel,
};
use crate::variant::Variant;

/// A symbol in the flat token-sequence view of a program: a real token, the
/// start padding, or the end-of-program marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SeqSym {
    Token(TokenKind, String),
    Start,
    Stop,
}

/// The token stream of a tree, ending with the stop symbol.
pub fn token_stream(tree: &Tree) -> Vec<SeqSym> {
    let mut out: Vec<SeqSym> = tree
        .tokens()
        .iter()
        .map(|t| SeqSym::Token(t.kind, t.text.clone()))
        .collect();
    out.push(SeqSym::Stop);
    out
}

// ---------------------------------------------------------------------------
// Raw n-grams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextCounts {
    pub total: u64,
    pub counts: Vec<(u32, u64)>,
}

/// Additively smoothed token n-gram with a closed vocabulary.
#[derive(Debug, Clone)]
pub struct NgramModel {
    pub order: usize,
    pub alpha: f64,
    /// Candidate vocabulary: every universe token plus Stop, in first-
    /// occurrence order. Start appears only inside context keys.
    pub vocab: IndexMap<SeqSym, u32>,
    pub contexts: IndexMap<Vec<i64>, ContextCounts>,
}

pub const START_ID: i64 = -1;

impl NgramModel {
    pub fn sym_id(&self, sym: &SeqSym) -> Option<u32> {
        self.vocab.get(sym).copied()
    }

    pub fn knows_token(&self, kind: TokenKind, text: &str) -> bool {
        self.vocab.contains_key(&SeqSym::Token(kind, text.to_string()))
    }

    fn context_key(&self, stream: &[u32], pos: usize) -> Vec<i64> {
        let n = self.order;
        (1..n)
            .rev()
            .map(|back| {
                if pos >= back {
                    stream[pos - back] as i64
                } else {
                    START_ID
                }
            })
            .collect()
    }

    /// Natural-log probability of one token stream (stop included).
    pub fn stream_ln_probs(&self, stream: &[u32]) -> Vec<f64> {
        let v = self.vocab.len() as f64;
        (0..stream.len())
            .map(|pos| {
                let key = self.context_key(stream, pos);
                let (total, count) = match self.contexts.get(&key) {
                    Some(cc) => {
                        let c = cc
                            .counts
                            .iter()
                            .find(|(id, _)| *id == stream[pos])
                            .map(|(_, c)| *c)
                            .unwrap_or(0);
                        (cc.total, c)
                    }
                    None => (0, 0),
                };
                ((count as f64 + self.alpha) / (total as f64 + self.alpha * v)).ln()
            })
            .collect()
    }

    pub fn encode(&self, tree: &Tree) -> Result<Vec<u32>> {
        token_stream(tree)
            .iter()
            .map(|sym| {
                self.sym_id(sym).ok_or_else(|| match sym {
                    SeqSym::Token(_, text) => Error::Eval(format!(
                        "token {text:?} absent from the model's token universe"
                    )),
                    _ => Error::Eval("stop symbol missing from vocabulary".to_string()),
                })
            })
            .collect()
    }
}

/// Count n-gram statistics and choose alpha on validation data.
pub fn train_ngram(
    train: &[Tree],
    universe: &[Tree],
    valid: Option<&[Tree]>,
    order: usize,
    alpha_grid: &[f64],
) -> Result<NgramModel> {
    if train.is_empty() {
        return Err(Error::Config("empty training corpus".to_string()));
    }
    if !(2..=10).contains(&order) {
        return Err(Error::Config(format!("unsupported n-gram order {order}")));
    }
    let mut vocab: IndexMap<SeqSym, u32> = IndexMap::new();
    for tree in universe {
        for tok in tree.tokens() {
            let next = vocab.len() as u32;
            vocab.entry(SeqSym::Token(tok.kind, tok.text.clone())).or_insert(next);
        }
    }
    let next = vocab.len() as u32;
    vocab.entry(SeqSym::Stop).or_insert(next);

    let mut model = NgramModel {
        order,
        alpha: *alpha_grid.first().unwrap_or(&1.0),
        vocab,
        contexts: IndexMap::new(),
    };
    for tree in train {
        let stream = model.encode(tree)?;
        for pos in 0..stream.len() {
            let key = model.context_key(&stream, pos);
            let cc = model
                .contexts
                .entry(key)
                .or_insert_with(|| ContextCounts { total: 0, counts: Vec::new() });
            cc.total += 1;
            match cc.counts.iter_mut().find(|(id, _)| *id == stream[pos]) {
                Some((_, c)) => *c += 1,
                None => cc.counts.push((stream[pos], 1)),
            }
        }
    }

    if let Some(valid) = valid {
        let streams: Vec<Vec<u32>> =
            valid.iter().map(|t| model.encode(t)).collect::<Result<_>>()?;
        let mut best: Option<(f64, f64)> = None;
        for alpha in alpha_grid {
            model.alpha = *alpha;
            let total: f64 = streams
                .iter()
                .map(|s| model.stream_ln_probs(s).iter().sum::<f64>())
                .sum();
            if best.map(|(b, _)| -total < b).unwrap_or(true) {
                best = Some((-total, *alpha));
            }
        }
        if let Some((_, alpha)) = best {
            model.alpha = alpha;
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Tabular PCFG
// ---------------------------------------------------------------------------

/// Count-based children model: additively smoothed conditionals over each
/// parent's support, mixed with the same default model the LTT variants use.
#[derive(Debug, Clone)]
pub struct PcfgModel {
    pub support: SupportTable,
    pub default_model: DefaultModel,
    pub smoothing: SmoothingConfig,
    /// Additive smoothing of the conditional counts within the support.
    pub count_alpha: f64,
}

impl PcfgModel {
    /// Natural-log smoothed probability of one production record.
    pub fn record_ln_prob(&self, rec: &crate::trace::ProductionRecord) -> Result<f64> {
        let base = self.base_prob(rec);
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
                "non-positive pcfg probability at step {}",
                rec.step
            )));
        }
        Ok(p.ln())
    }

    fn base_prob(&self, rec: &crate::trace::ProductionRecord) -> Option<f64> {
        let sup = self.support.parents.get(&rec.parent)?;
        let tuple_id = self.support.tuples.get(&rec.tuple)?;
        let pos = sup.position(tuple_id)?;
        let denom = sup.total as f64 + self.count_alpha * sup.len() as f64;
        Some((sup.counts[pos] as f64 + self.count_alpha) / denom)
    }
}

pub fn train_pcfg(
    train: &[Tree],
    universe: &[Tree],
    valid: Option<&[Tree]>,
    cfg: &TrainConfig,
) -> Result<PcfgModel> {
    let records: Vec<_> = train
        .iter()
        .map(|t| crate::trace::extract_records(t, false))
        .collect::<Result<_>>()?;
    let assets = build_assets(&records, universe, false)?;
    let mut model = PcfgModel {
        support: assets.support,
        default_model: assets.default_model,
        smoothing: SmoothingConfig {
            pi: *cfg.pi_grid.first().unwrap_or(&0.98),
            alpha: *cfg.alpha_grid.first().unwrap_or(&0.2),
        },
        count_alpha: *cfg.alpha_grid.first().unwrap_or(&0.2),
    };
    if let Some(valid) = valid {
        let valid_records: Vec<_> = valid
            .iter()
            .map(|t| crate::trace::extract_records(t, false))
            .collect::<Result<_>>()?;
        let mut best: Option<(f64, f64, f64)> = None;
        for count_alpha in &cfg.alpha_grid {
            for pi in &cfg.pi_grid {
                model.count_alpha = *count_alpha;
                model.smoothing = SmoothingConfig { pi: *pi, alpha: *count_alpha };
                let mut total = 0.0;
                for recs in &valid_records {
                    for rec in recs {
                        total += model.record_ln_prob(rec)?;
                    }
                }
                if best.map(|(b, _, _)| -total < b).unwrap_or(true) {
                    best = Some((-total, *count_alpha, *pi));
                }
            }
        }
        if let Some((_, count_alpha, pi)) = best {
            model.count_alpha = count_alpha;
            model.smoothing = SmoothingConfig { pi, alpha: count_alpha };
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Log-bilinear token models
// ---------------------------------------------------------------------------

/// Shared pieces of the flat log-bilinear token models: a candidate list
/// over the closed vocabulary (plus Stop) and helpers to featurize windows.
#[derive(Debug, Clone)]
pub struct TokenCandidates {
    /// Param ids, one per candidate.
    pub ids: Vec<u32>,
    index: HashMap<(TokenKind, String), usize>,
    stop_pos: usize,
}

impl TokenCandidates {
    pub fn build(vocab: &Vocab, universe_tokens: &[(TokenKind, String)]) -> TokenCandidates {
        let mut ids = Vec::new();
        let mut index = HashMap::new();
        for (kind, text) in universe_tokens {
            let id = vocab.get(&RKey::Token(*kind, text.clone())).expect("token registered");
            index.insert((*kind, text.clone()), ids.len());
            ids.push(id);
        }
        let stop_pos = ids.len();
        ids.push(vocab.get(&RKey::Stop).expect("stop registered"));
        TokenCandidates { ids, index, stop_pos }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, sym: &SeqSym) -> Option<usize> {
        match sym {
            SeqSym::Token(kind, text) => self.index.get(&(*kind, text.clone())).copied(),
            SeqSym::Stop => Some(self.stop_pos),
            SeqSym::Start => None,
        }
    }
}

/// Softmax loss over a fixed candidate list; the token-model analogue of the
/// exact tuple loss.
pub(crate) fn seq_item_loss(
    params: &ParamStore,
    candidates: &[u32],
    feats: &[(u32, u32)],
    target: usize,
    mut gbuf: Option<&mut GradBuf>,
) -> f64 {
    let d = params.dim;
    let r_con = context_repr(params, feats);
    let energies: Vec<f64> = candidates
        .iter()
        .map(|pid| {
            let row = params.r_row(*pid);
            row.iter().zip(&r_con).map(|(a, b)| a * b).sum::<f64>() + params.b[*pid as usize]
        })
        .collect();
    let log_probs = log_softmax(&energies);
    let loss = -log_probs[target];
    if let Some(gbuf) = gbuf.as_deref_mut() {
        let mut d_rcon = vec![0.0; d];
        for (pos, pid) in candidates.iter().enumerate() {
            let coef = log_probs[pos].exp() - if pos == target { 1.0 } else { 0.0 };
            if coef == 0.0 {
                continue;
            }
            gbuf.add_b(*pid, coef);
            {
                let row = params.r_row(*pid);
                for k in 0..d {
                    d_rcon[k] += coef * row[k];
                }
            }
            let grow = gbuf.r_row_mut(*pid);
            for k in 0..d {
                grow[k] += coef * r_con[k];
            }
        }
        backprop_context(params, feats, &d_rcon, gbuf);
    }
    loss
}

/// Per-state candidate distributions of an HMM-style emitter; states share
/// nothing with the positions, so one softmax per state suffices.
fn state_distributions(params: &ParamStore, candidates: &[u32], k: usize) -> Vec<Distribution> {
    (0..k)
        .map(|s| {
            let pid = params.vocab.get(&RKey::Latent(s as u16)).expect("latent registered");
            let feats = vec![(0u32, pid)];
            let r_con = context_repr(params, &feats);
            let energies: Vec<f64> = candidates
                .iter()
                .map(|cid| {
                    let row = params.r_row(*cid);
                    row.iter().zip(&r_con).map(|(a, b)| a * b).sum::<f64>()
                        + params.b[*cid as usize]
                })
                .collect();
            Distribution { log_probs: log_softmax(&energies) }
        })
        .collect()
}

fn token_vocab(universe_tokens: &[(TokenKind, String)], latent_k: Option<usize>) -> Vocab {
    let mut vocab = Vocab::new();
    for (kind, text) in universe_tokens {
        vocab.intern(RKey::Token(*kind, text.clone()));
    }
    vocab.intern(RKey::StartPad);
    vocab.intern(RKey::Stop);
    if let Some(k) = latent_k {
        for s in 0..k {
            vocab.intern(RKey::Latent(s as u16));
        }
    }
    vocab
}

fn universe_tokens_of(trees: &[Tree]) -> Vec<(TokenKind, String)> {
    let mut seen: IndexMap<(TokenKind, String), ()> = IndexMap::new();
    for tree in trees {
        for tok in tree.tokens() {
            seen.entry((tok.kind, tok.text.clone())).or_insert(());
        }
    }
    seen.into_keys().collect()
}

/// The log-bilinear n-gram over tokens: position-specific diagonal matrices
/// over the previous window, softmax over the closed vocabulary.
#[derive(Debug, Clone)]
pub struct LblNgramModel {
    pub order: usize,
    pub params: ParamStore,
    pub candidates: TokenCandidates,
}

impl LblNgramModel {
    pub fn knows_token(&self, kind: TokenKind, text: &str) -> bool {
        self.candidates.index.contains_key(&(kind, text.to_string()))
    }

    fn featurize(&self, stream_ids: &[u32], pos: usize) -> Vec<(u32, u32)> {
        let start = self.params.vocab.get(&RKey::StartPad).expect("start registered");
        self.params
            .slots
            .iter()
            .enumerate()
            .map(|(slot, kind)| {
                let back = match kind {
                    crate::variant::SlotKind::PrevToken(j) => *j,
                    _ => unreachable!("token model slots are PrevToken"),
                };
                if pos >= back {
                    (slot as u32, self.candidates.ids[stream_ids[pos - back] as usize])
                } else {
                    (slot as u32, start)
                }
            })
            .collect()
    }

    /// Candidate positions of a tree's stream (stop included).
    pub fn encode(&self, tree: &Tree) -> Result<Vec<u32>> {
        token_stream(tree)
            .iter()
            .map(|sym| {
                self.candidates.position(sym).map(|p| p as u32).ok_or_else(|| match sym {
                    SeqSym::Token(_, text) => Error::Eval(format!(
                        "token {text:?} absent from the model's token universe"
                    )),
                    _ => Error::Eval("stop symbol missing".to_string()),
                })
            })
            .collect()
    }

    pub fn stream_ln_probs(&self, stream: &[u32]) -> Vec<f64> {
        (0..stream.len())
            .map(|pos| {
                let feats = self.featurize(stream, pos);
                -seq_item_loss(&self.params, &self.candidates.ids, &feats, stream[pos] as usize, None)
            })
            .collect()
    }
}

pub fn train_lbl_ngram(
    train: &[Tree],
    universe: &[Tree],
    valid: Option<&[Tree]>,
    cfg: &TrainConfig,
) -> Result<LblNgramModel> {
    if train.is_empty() {
        return Err(Error::Config("empty training corpus".to_string()));
    }
    let universe_tokens = universe_tokens_of(universe);
    let vocab = token_vocab(&universe_tokens, None);
    let params = ParamStore::init(vocab, Variant::LblNgram10.context_slots(), cfg.dim, cfg.seed);
    let candidates = TokenCandidates::build(&params.vocab, &universe_tokens);
    let mut model = LblNgramModel { order: 10, params, candidates };

    let streams: Vec<Vec<u32>> = train.iter().map(|t| model.encode(t)).collect::<Result<_>>()?;
    let valid_streams: Option<Vec<Vec<u32>>> = match valid {
        Some(v) => Some(v.iter().map(|t| model.encode(t)).collect::<Result<_>>()?),
        None => None,
    };

    let mut opt = AdaGradState::new(&model.params, 0);
    let mut gbuf = GradBuf::new(&model.params);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        for (db_idx, db) in streams.chunks(cfg.databatch.max(1)).enumerate() {
            let mut items: Vec<(usize, usize)> = Vec::new();
            for (t, stream) in db.iter().enumerate() {
                for pos in 0..stream.len() {
                    items.push((t, pos));
                }
            }
            let mut rng = rng_for(cfg.seed, 11, epoch as u64, db_idx as u64);
            shuffle(&mut items, &mut rng);
            for chunk in items.chunks(cfg.minibatch.max(1)) {
                for (t, pos) in chunk {
                    let stream = &db[*t];
                    let feats = model.featurize(stream, *pos);
                    seq_item_loss(
                        &model.params,
                        &model.candidates.ids,
                        &feats,
                        stream[*pos] as usize,
                        Some(&mut gbuf),
                    );
                }
                let scale = 1.0 / chunk.len() as f64;
                gbuf.apply(&mut model.params, &mut opt, scale, cfg.learning_rate, cfg.adagrad_epsilon);
            }
        }
        if let (Some(vs), true) = (&valid_streams, cfg.patience > 0) {
            let bits: f64 = -vs
                .iter()
                .map(|s| model.stream_ln_probs(s).iter().sum::<f64>())
                .sum::<f64>();
            let improved = best.as_ref().map(|(b, _)| bits < *b).unwrap_or(true);
            if improved {
                best = Some((bits, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok(model)
}

/// Token-level HMM: tabular transitions, log-bilinear emissions.
#[derive(Debug, Clone)]
pub struct LblHmmModel {
    pub k: usize,
    pub params: ParamStore,
    pub candidates: TokenCandidates,
    pub chain: LatentChain,
}

impl LblHmmModel {
    pub fn knows_token(&self, kind: TokenKind, text: &str) -> bool {
        self.candidates.index.contains_key(&(kind, text.to_string()))
    }

    pub fn encode(&self, tree: &Tree) -> Result<Vec<u32>> {
        token_stream(tree)
            .iter()
            .map(|sym| {
                self.candidates.position(sym).map(|p| p as u32).ok_or_else(|| match sym {
                    SeqSym::Token(_, text) => Error::Eval(format!(
                        "token {text:?} absent from the model's token universe"
                    )),
                    _ => Error::Eval("stop symbol missing".to_string()),
                })
            })
            .collect()
    }

    fn emissions(&self, stream: &[u32], dists: &[Distribution]) -> Vec<f64> {
        let k = self.k;
        let n = stream.len();
        let mut out = vec![0.0; n * k];
        for (i, cand) in stream.iter().enumerate() {
            for s in 0..k {
                out[i * k + s] = dists[s].log_probs[*cand as usize];
            }
        }
        out
    }

    pub fn transition_model(&self) -> TransitionModel {
        TransitionModel { k: self.k, prior: self.chain.prior(), trans: self.chain.transitions() }
    }

    /// Per-position log-probability increments via the forward algorithm.
    pub fn stream_ln_increments(&self, stream: &[u32]) -> Vec<f64> {
        let dists = state_distributions(&self.params, &self.candidates.ids, self.k);
        let emissions = self.emissions(stream, &dists);
        forward_increments(&emissions, stream.len(), &self.transition_model())
    }

    pub fn stream_ln_prob(&self, stream: &[u32]) -> f64 {
        self.stream_ln_increments(stream).iter().sum()
    }
}

pub fn train_lbl_hmm(
    train: &[Tree],
    universe: &[Tree],
    valid: Option<&[Tree]>,
    cfg: &TrainConfig,
) -> Result<LblHmmModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training corpus".to_string()));
    }
    let k = cfg.latent_states;
    let universe_tokens = universe_tokens_of(universe);
    let vocab = token_vocab(&universe_tokens, Some(k));
    let params = ParamStore::init(vocab, Variant::LblHmm.context_slots(), cfg.dim, cfg.seed);
    let candidates = TokenCandidates::build(&params.vocab, &universe_tokens);
    let mut model = LblHmmModel { k, params, candidates, chain: LatentChain::new(k) };

    let streams: Vec<Vec<u32>> = train.iter().map(|t| model.encode(t)).collect::<Result<_>>()?;
    let valid_streams: Option<Vec<Vec<u32>>> = match valid {
        Some(v) => Some(v.iter().map(|t| model.encode(t)).collect::<Result<_>>()?),
        None => None,
    };

    let latent_pids: Vec<u32> = (0..k)
        .map(|s| model.params.vocab.get(&RKey::Latent(s as u16)).unwrap())
        .collect();
    let mut opt = AdaGradState::new(&model.params, k);
    let mut gbuf = GradBuf::new(&model.params);
    let mut best: Option<(f64, ParamStore, LatentChain)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        for (db_idx, db) in streams.chunks(cfg.databatch.max(1)).enumerate() {
            let tm = model.transition_model();
            let dists = state_distributions(&model.params, &model.candidates.ids, k);
            let mut trans_grad = vec![0.0; k * k];
            let mut prior_grad = vec![0.0; k];
            let mut states_per_stream: Vec<Vec<usize>> = Vec::with_capacity(db.len());
            let mut rng = rng_for(cfg.seed, 13, epoch as u64, db_idx as u64);
            for stream in db {
                let emissions = model.emissions(stream, &dists);
                let (post, _ll) = forward_backward(&emissions, stream.len(), &tm)?;
                let n = stream.len();
                let mut states = Vec::with_capacity(n);
                for i in 0..n {
                    let row = &post.unary[i * k..(i + 1) * k];
                    states.push(if k == 1 { 0 } else { sample_categorical(row, &mut rng) });
                }
                for i in 1..n {
                    for p in 0..k {
                        let qp = post.unary[(i - 1) * k + p];
                        for s in 0..k {
                            let q = post.pairwise[(i - 1) * k * k + p * k + s];
                            trans_grad[p * k + s] -= q - qp * tm.trans[p * k + s];
                        }
                    }
                }
                for s in 0..k {
                    prior_grad[s] -= post.unary[s] - tm.prior[s];
                }
                states_per_stream.push(states);
            }

            let mut items: Vec<(usize, usize)> = Vec::new();
            for (t, stream) in db.iter().enumerate() {
                for pos in 0..stream.len() {
                    items.push((t, pos));
                }
            }
            let mut rng = rng_for(cfg.seed, 11, epoch as u64, db_idx as u64);
            shuffle(&mut items, &mut rng);
            for chunk in items.chunks(cfg.minibatch.max(1)) {
                for (t, pos) in chunk {
                    let stream = &db[*t];
                    let state = states_per_stream[*t][*pos];
                    let feats = vec![(0u32, latent_pids[state])];
                    seq_item_loss(
                        &model.params,
                        &model.candidates.ids,
                        &feats,
                        stream[*pos] as usize,
                        Some(&mut gbuf),
                    );
                }
                let scale = 1.0 / chunk.len() as f64;
                gbuf.apply(&mut model.params, &mut opt, scale, cfg.learning_rate, cfg.adagrad_epsilon);
            }
            adagrad_apply(&mut model.chain.trans_logits, &mut opt.trans, &trans_grad, cfg.learning_rate, cfg.adagrad_epsilon);
            adagrad_apply(&mut model.chain.prior_logits, &mut opt.prior, &prior_grad, cfg.learning_rate, cfg.adagrad_epsilon);
        }
        if let (Some(vs), true) = (&valid_streams, cfg.patience > 0) {
            let bits: f64 = -vs.iter().map(|s| model.stream_ln_prob(s)).sum::<f64>();
            let improved = best.as_ref().map(|(b, _, _)| bits < *b).unwrap_or(true);
            if improved {
                best = Some((bits, model.params.clone(), model.chain.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, p, c)) = best {
        model.params = p;
        model.chain = c;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::Token;
    use crate::minilang::parse;

    fn corpus() -> Vec<Tree> {
        ["fn f() { int a = 0; a = a + 1; return a; }",
         "fn g(int x) { return x; }",
         "fn h() { int b = 2; return b; }"]
            .iter()
            .map(|s| parse(s).unwrap())
            .collect()
    }

    #[test]
    fn bigram_probability_from_counts() {
        // Corpus "a b a b": with alpha = 1 and V = {a, b, stop},
        // P(b | a) = (2 + 1) / (2 + 3) = 0.6.
        // Build a fake single-program tree whose tokens are a b a b.
        use crate::ast::{AstNode, Child, NodeKind};
        let leaves: Vec<Child> = ["a", "b", "a", "b"]
            .iter()
            .map(|t| Child::Token(Token::ident(*t)))
            .collect();
        let tree = Tree::new(AstNode::new(NodeKind::Block, leaves));
        let model = train_ngram(
            std::slice::from_ref(&tree),
            std::slice::from_ref(&tree),
            None,
            2,
            &[1.0],
        )
        .unwrap();
        let a = model.sym_id(&SeqSym::Token(TokenKind::Identifier, "a".into())).unwrap();
        let b = model.sym_id(&SeqSym::Token(TokenKind::Identifier, "b".into())).unwrap();
        let lp = model.stream_ln_probs(&[a, b]);
        assert!((lp[1].exp() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn huge_alpha_is_uniform() {
        let trees = corpus();
        let model = train_ngram(&trees, &trees, None, 2, &[1e12]).unwrap();
        let stream = model.encode(&trees[0]).unwrap();
        let lp = model.stream_ln_probs(&stream);
        let v = model.vocab.len() as f64;
        for p in lp {
            assert!((p.exp() - 1.0 / v).abs() < 1e-9);
        }
    }

    #[test]
    fn unseen_context_is_uniform() {
        let trees = corpus();
        let model = train_ngram(&trees, &trees, None, 3, &[0.5]).unwrap();
        // A context never observed: (return, return).
        let ret = model.sym_id(&SeqSym::Token(TokenKind::Keyword, "return".into())).unwrap();
        let lp = model.stream_ln_probs(&[ret, ret, ret]);
        let v = model.vocab.len() as f64;
        assert!((lp[2].exp() - 1.0 / v).abs() < 1e-12);
    }

    #[test]
    fn pcfg_single_observed_production_costs_zero_bits() {
        let tree = parse("fn f() { }").unwrap();
        let cfg = TrainConfig { alpha_grid: vec![1e-9], pi_grid: vec![1.0], ..TrainConfig::default() };
        let model = train_pcfg(std::slice::from_ref(&tree), std::slice::from_ref(&tree), None, &cfg).unwrap();
        let recs = crate::trace::extract_records(&tree, false).unwrap();
        for rec in &recs {
            let lp = model.record_ln_prob(rec).unwrap();
            assert!(lp.abs() < 1e-6, "expected ~0 bits, got {lp}");
        }
    }

    #[test]
    fn pcfg_two_equiprobable_tuples_cost_one_bit() {
        let tree = parse("fn f() { return 0; } fn g() { return 1; }").unwrap();
        let cfg = TrainConfig { alpha_grid: vec![1e-12], pi_grid: vec![1.0], ..TrainConfig::default() };
        let model = train_pcfg(std::slice::from_ref(&tree), std::slice::from_ref(&tree), None, &cfg).unwrap();
        let recs = crate::trace::extract_records(&tree, false).unwrap();
        let lit = recs
            .iter()
            .find(|r| r.parent.kind == crate::ast::NodeKind::Literal)
            .unwrap();
        let bits = model.record_ln_prob(lit).unwrap() / std::f64::consts::LN_2;
        assert!((bits + 1.0).abs() < 1e-6, "expected -1 bit, got {bits}");
    }

    #[test]
    fn lbl_models_with_zero_params_are_uniform() {
        let trees = corpus();
        let universe_tokens = universe_tokens_of(&trees);
        let vocab = token_vocab(&universe_tokens, None);
        let mut params =
            ParamStore::init(vocab, Variant::LblNgram10.context_slots(), 4, 1);
        for v in params.r.iter_mut() {
            *v = 0.0;
        }
        for v in params.b.iter_mut() {
            *v = 0.0;
        }
        let candidates = TokenCandidates::build(&params.vocab, &universe_tokens);
        let model = LblNgramModel { order: 10, params, candidates };
        let stream = model.encode(&trees[0]).unwrap();
        let lp = model.stream_ln_probs(&stream);
        let v = model.candidates.len() as f64;
        for p in &lp {
            assert!((p.exp() - 1.0 / v).abs() < 1e-12);
        }
    }

    #[test]
    fn hmm_k1_equals_unigram() {
        let trees = corpus();
        let cfg = TrainConfig {
            latent_states: 1,
            dim: 8,
            epochs: 3,
            patience: 0,
            ..TrainConfig::default()
        };
        let model = train_lbl_hmm(&trees, &trees, None, &cfg).unwrap();
        let stream = model.encode(&trees[1]).unwrap();
        // Unigram route: the single state's softmax, position independent.
        let dists = state_distributions(&model.params, &model.candidates.ids, 1);
        let want: f64 = stream.iter().map(|c| dists[0].log_probs[*c as usize]).sum();
        let got = model.stream_ln_prob(&stream);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn hmm_matches_brute_force_enumeration() {
        // 5-token toy against exhaustive latent-path enumeration.
        let trees = corpus();
        let cfg = TrainConfig {
            latent_states: 2,
            dim: 6,
            epochs: 2,
            patience: 0,
            ..TrainConfig::default()
        };
        let model = train_lbl_hmm(&trees, &trees, None, &cfg).unwrap();
        let stream: Vec<u32> = model.encode(&trees[1]).unwrap().into_iter().take(5).collect();
        let got = model.stream_ln_prob(&stream);

        let dists = state_distributions(&model.params, &model.candidates.ids, 2);
        let tm = model.transition_model();
        let k = 2usize;
        let n = stream.len();
        let mut total = f64::NEG_INFINITY;
        for code in 0..k.pow(n as u32) {
            let mut c = code;
            let mut states = Vec::with_capacity(n);
            for _ in 0..n {
                states.push(c % k);
                c /= k;
            }
            let mut lp = tm.prior[states[0]].ln() + dists[states[0]].log_probs[stream[0] as usize];
            for i in 1..n {
                lp += tm.trans[states[i - 1] * k + states[i]].ln()
                    + dists[states[i]].log_probs[stream[i] as usize];
            }
            total = crate::model::log_sum_exp(&[total, lp]);
        }
        assert!((got - total).abs() < 1e-9, "{got} vs {total}");
    }
}
