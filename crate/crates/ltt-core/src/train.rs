//! Training: support construction, exact-ML and NCE gradient training with
//! AdaGrad, and EM with forward-backward for the latent-variable variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ast::{AnnotatedKind, Tree};
use crate::error::{Error, Result};
use crate::model::{
    build_assets, context_repr, log_softmax, log_sum_exp, scope_candidate_ids, ParamStore,
    LatentChain, LttModel, RKey, SmoothingConfig, SupportTable, TupleTable, Vocab,
};
use crate::trace::{extract_records, ProductionRecord, DEPTH_CAP, RANK_CAP, SCOPE_FEATURES};
use crate::variant::Variant;
use crate::ast::{NodeKind, ScopeTag, TokenKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerKind {
    Exact,
    Nce,
}

/// Training configuration; the CLI's config file mirrors these fields.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: Variant,
    pub dim: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub nce_k: usize,
    pub latent_states: usize,
    pub seed: u64,
    pub trainer: TrainerKind,
    /// Number of whole programs per databatch.
    pub databatch: usize,
    pub pi_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    /// Early-stopping patience in epochs when a validation set is given;
    /// 0 disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            variant: Variant::Ltt0,
            dim: 50,
            epochs: 40,
            minibatch: 64,
            learning_rate: 0.1,
            adagrad_epsilon: 1e-8,
            nce_k: 10,
            latent_states: 32,
            seed: 1,
            trainer: TrainerKind::Exact,
            databatch: 10,
            pi_grid: vec![0.9, 0.98, 0.995],
            alpha_grid: vec![0.05, 0.2, 1.0],
            patience: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_states < 1 {
            return Err(Error::Config("latent_states must be >= 1".into()));
        }
        if self.nce_k < 1 {
            return Err(Error::Config("nce_k must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.latent_states > 4096 {
            return Err(Error::Config("latent_states exceeds the configured maximum (4096)".into()));
        }
        Ok(())
    }
}

/// Derive an independent deterministic RNG stream.
pub fn rng_for(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    // splitmix-style mixing keeps streams independent across (tag, a, b).
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(a.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(b.wrapping_mul(0x94D049BB133111EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

const TAG_SHUFFLE: u64 = 1;
const TAG_NCE: u64 = 2;
const TAG_LATENT: u64 = 3;

// ---------------------------------------------------------------------------
// AdaGrad
// ---------------------------------------------------------------------------

/// Elementwise AdaGrad: acc += g^2; theta -= lr * g / (sqrt(acc) + eps).
pub fn adagrad_apply(theta: &mut [f64], acc: &mut [f64], grad: &[f64], lr: f64, eps: f64) {
    for i in 0..theta.len() {
        let g = grad[i];
        acc[i] += g * g;
        theta[i] -= lr * g / (acc[i].sqrt() + eps);
    }
}

/// Squared-gradient accumulators, shaped like the parameters they track.
#[derive(Debug, Clone)]
pub struct AdaGradState {
    pub r: Vec<f64>,
    pub b: Vec<f64>,
    pub wcon: Vec<f64>,
    pub wch: Vec<f64>,
    pub trans: Vec<f64>,
    pub prior: Vec<f64>,
}

impl AdaGradState {
    pub fn new(params: &ParamStore, latent_k: usize) -> AdaGradState {
        AdaGradState {
            r: vec![0.0; params.r.len()],
            b: vec![0.0; params.b.len()],
            wcon: vec![0.0; params.wcon.len()],
            wch: vec![0.0; params.wch.len()],
            trans: vec![0.0; latent_k * latent_k],
            prior: vec![0.0; latent_k],
        }
    }
}

/// Sparse gradient buffer over the parameter store.
pub struct GradBuf {
    dim: usize,
    pub r: Vec<f64>,
    pub b: Vec<f64>,
    pub wcon: Vec<f64>,
    pub wch: Vec<f64>,
    touched_r: Vec<u32>,
    touched_b: Vec<u32>,
    r_flag: Vec<bool>,
    b_flag: Vec<bool>,
}

impl GradBuf {
    pub fn new(params: &ParamStore) -> GradBuf {
        GradBuf {
            dim: params.dim,
            r: vec![0.0; params.r.len()],
            b: vec![0.0; params.b.len()],
            wcon: vec![0.0; params.wcon.len()],
            wch: vec![0.0; params.wch.len()],
            touched_r: Vec::new(),
            touched_b: Vec::new(),
            r_flag: vec![false; params.b.len()],
            b_flag: vec![false; params.b.len()],
        }
    }

    #[inline]
    fn touch_r(&mut self, id: u32) {
        if !self.r_flag[id as usize] {
            self.r_flag[id as usize] = true;
            self.touched_r.push(id);
        }
    }

    #[inline]
    fn touch_b(&mut self, id: u32) {
        if !self.b_flag[id as usize] {
            self.b_flag[id as usize] = true;
            self.touched_b.push(id);
        }
    }

    #[inline]
    pub fn add_b(&mut self, id: u32, g: f64) {
        self.touch_b(id);
        self.b[id as usize] += g;
    }

    #[inline]
    pub fn r_row_mut(&mut self, id: u32) -> &mut [f64] {
        self.touch_r(id);
        let d = self.dim;
        &mut self.r[id as usize * d..(id as usize + 1) * d]
    }

    fn clear(&mut self) {
        let d = self.dim;
        for id in self.touched_r.drain(..) {
            self.r_flag[id as usize] = false;
            for v in &mut self.r[id as usize * d..(id as usize + 1) * d] {
                *v = 0.0;
            }
        }
        for id in self.touched_b.drain(..) {
            self.b_flag[id as usize] = false;
            self.b[id as usize] = 0.0;
        }
        for v in &mut self.wcon {
            *v = 0.0;
        }
        for v in &mut self.wch {
            *v = 0.0;
        }
    }

    /// AdaGrad-apply the accumulated (batch-mean) gradients and reset.
    pub fn apply(&mut self, params: &mut ParamStore, opt: &mut AdaGradState, scale: f64, lr: f64, eps: f64) {
        let d = self.dim;
        for id in &self.touched_r {
            let base = *id as usize * d;
            for k in 0..d {
                let g = self.r[base + k] * scale;
                opt.r[base + k] += g * g;
                params.r[base + k] -= lr * g / (opt.r[base + k].sqrt() + eps);
            }
        }
        for id in &self.touched_b {
            let i = *id as usize;
            let g = self.b[i] * scale;
            opt.b[i] += g * g;
            params.b[i] -= lr * g / (opt.b[i].sqrt() + eps);
        }
        for i in 0..self.wcon.len() {
            let g = self.wcon[i] * scale;
            if g != 0.0 {
                opt.wcon[i] += g * g;
                params.wcon[i] -= lr * g / (opt.wcon[i].sqrt() + eps);
            }
        }
        for i in 0..self.wch.len() {
            let g = self.wch[i] * scale;
            if g != 0.0 {
                opt.wch[i] += g * g;
                params.wch[i] -= lr * g / (opt.wch[i].sqrt() + eps);
            }
        }
        self.clear();
    }
}

// ---------------------------------------------------------------------------
// Training items
// ---------------------------------------------------------------------------

/// One production prepared for gradient computation.
#[derive(Debug, Clone)]
pub enum TrainItem {
    Tuple {
        /// Index of the parent in `support.parents`.
        parent_idx: usize,
        feats: Vec<(u32, u32)>,
        target_pos: usize,
    },
    Scope {
        feats: Vec<(u32, u32)>,
        candidates: Vec<[Option<u32>; SCOPE_FEATURES]>,
        target: usize,
    },
}

/// Featurize one record into a training item. Records whose tuples fall
/// outside the support (possible only off the training set) are skipped.
pub fn build_item(
    rec: &ProductionRecord,
    latent: Option<usize>,
    params: &ParamStore,
    support: &SupportTable,
) -> Option<TrainItem> {
    let feats = crate::model::featurize(&params.slots, rec.parent, &rec.ctx, latent, &params.vocab);
    if let Some(choice) = &rec.scope_choice {
        let candidates: Vec<[Option<u32>; SCOPE_FEATURES]> = choice
            .candidates
            .iter()
            .map(|v| scope_candidate_ids(v, &params.vocab))
            .collect();
        return Some(TrainItem::Scope { feats, candidates, target: choice.target });
    }
    let (parent_idx, _, sup) = support.parents.get_full(&rec.parent)?;
    let tuple_id = support.tuples.get(&rec.tuple)?;
    let target_pos = sup.position(tuple_id)?;
    Some(TrainItem::Tuple { parent_idx, feats, target_pos })
}

/// Natural-log loss of one item; accumulates gradients when `gbuf` is given.
pub fn exact_item_loss(
    params: &ParamStore,
    tuple_param_ids: &[u32],
    support: &SupportTable,
    item: &TrainItem,
    mut gbuf: Option<&mut GradBuf>,
) -> f64 {
    let d = params.dim;
    match item {
        TrainItem::Tuple { parent_idx, feats, target_pos } => {
            let sup = &support.parents[*parent_idx];
            let r_con = context_repr(params, feats);
            let energies = crate::model::support_energies(params, tuple_param_ids, sup, &r_con);
            let log_probs = log_softmax(&energies);
            let loss = -log_probs[*target_pos];
            if let Some(gbuf) = gbuf.as_deref_mut() {
                let mut d_rcon = vec![0.0; d];
                for (pos, tid) in sup.tuples.iter().enumerate() {
                    let coef = log_probs[pos].exp() - if pos == *target_pos { 1.0 } else { 0.0 };
                    if coef == 0.0 {
                        continue;
                    }
                    let pid = tuple_param_ids[*tid as usize];
                    gbuf.add_b(pid, coef);
                    {
                        let row = params.r_row(pid);
                        for k in 0..d {
                            d_rcon[k] += coef * row[k];
                        }
                    }
                    let grow = gbuf.r_row_mut(pid);
                    for k in 0..d {
                        grow[k] += coef * r_con[k];
                    }
                }
                backprop_context(params, feats, &d_rcon, gbuf);
            }
            loss
        }
        TrainItem::Scope { feats, candidates, target } => {
            let r_con = context_repr(params, feats);
            let energies: Vec<f64> = candidates
                .iter()
                .map(|ids| crate::model::scope_candidate_energy(params, ids, &r_con))
                .collect();
            let log_probs = log_softmax(&energies);
            let loss = -log_probs[*target];
            if let Some(gbuf) = gbuf.as_deref_mut() {
                let mut d_rcon = vec![0.0; d];
                for (pos, ids) in candidates.iter().enumerate() {
                    let coef = log_probs[pos].exp() - if pos == *target { 1.0 } else { 0.0 };
                    if coef == 0.0 {
                        continue;
                    }
                    for (u, id) in ids.iter().enumerate() {
                        let Some(id) = id else { continue };
                        gbuf.add_b(*id, coef);
                        let w = params.wch_row(u).to_vec();
                        let row = params.r_row(*id).to_vec();
                        for k in 0..d {
                            d_rcon[k] += coef * w[k] * row[k];
                            gbuf.wch[u * d + k] += coef * row[k] * r_con[k];
                        }
                        let grow = gbuf.r_row_mut(*id);
                        for k in 0..d {
                            grow[k] += coef * w[k] * r_con[k];
                        }
                    }
                }
                backprop_context(params, feats, &d_rcon, gbuf);
            }
            loss
        }
    }
}

/// Push a d(loss)/d(r_con) vector back onto the context-side parameters.
pub(crate) fn backprop_context(params: &ParamStore, feats: &[(u32, u32)], d_rcon: &[f64], gbuf: &mut GradBuf) {
    let d = params.dim;
    for (slot, id) in feats {
        let w = params.wcon_row(*slot as usize).to_vec();
        let row = params.r_row(*id).to_vec();
        for k in 0..d {
            gbuf.wcon[*slot as usize * d + k] += d_rcon[k] * row[k];
        }
        let grow = gbuf.r_row_mut(*id);
        for k in 0..d {
            grow[k] += d_rcon[k] * w[k];
        }
    }
}

fn ln_sigmoid(x: f64) -> f64 {
    // -softplus(-x), stable at both tails.
    if x > 30.0 {
        -(-x).exp()
    } else if x < -30.0 {
        x
    } else {
        -(1.0 + (-x).exp()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Noise distributions for NCE, one per parent kind: the additively smoothed
/// empirical tuple distribution over the support.
pub struct NoiseTable {
    /// Aligned with `support.parents`.
    pub per_parent: Vec<NoiseDist>,
}

pub struct NoiseDist {
    pub ln_prob: Vec<f64>,
    cum: Vec<f64>,
}

impl NoiseDist {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        match self.cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => (i + 1).min(self.cum.len() - 1),
            Err(i) => i.min(self.cum.len() - 1),
        }
    }
}

pub fn build_noise_table(support: &SupportTable, alpha: f64) -> NoiseTable {
    let per_parent = support
        .parents
        .values()
        .map(|sup| {
            let denom = sup.total as f64 + alpha * sup.len() as f64;
            let probs: Vec<f64> = sup
                .counts
                .iter()
                .map(|c| (*c as f64 + alpha) / denom)
                .collect();
            let mut cum = Vec::with_capacity(probs.len());
            let mut acc = 0.0;
            for p in &probs {
                acc += p;
                cum.push(acc);
            }
            if let Some(last) = cum.last_mut() {
                *last = 1.0;
            }
            NoiseDist { ln_prob: probs.iter().map(|p| p.ln()).collect(), cum }
        })
        .collect();
    NoiseTable { per_parent }
}

/// NCE loss of one tuple item against fixed noise draws: the binary logistic
/// objective distinguishing the datum from `noise_positions`, scoring with
/// the unnormalized negative energy.
pub fn nce_item_loss(
    params: &ParamStore,
    tuple_param_ids: &[u32],
    support: &SupportTable,
    parent_idx: usize,
    feats: &[(u32, u32)],
    target_pos: usize,
    noise: &NoiseDist,
    noise_positions: &[usize],
    mut gbuf: Option<&mut GradBuf>,
) -> f64 {
    let d = params.dim;
    let sup = &support.parents[parent_idx];
    let k = noise_positions.len() as f64;
    let r_con = context_repr(params, feats);

    let score = |pos: usize| -> f64 {
        let pid = tuple_param_ids[sup.tuples[pos] as usize];
        let row = params.r_row(pid);
        row.iter().zip(&r_con).map(|(a, b)| a * b).sum::<f64>() + params.b[pid as usize]
    };

    let delta_data = score(target_pos) - (k.ln() + noise.ln_prob[target_pos]);
    let mut loss = -ln_sigmoid(delta_data);
    let mut coefs: Vec<(usize, f64)> = vec![(target_pos, -sigmoid(-delta_data))];
    for pos in noise_positions {
        let delta = score(*pos) - (k.ln() + noise.ln_prob[*pos]);
        loss -= ln_sigmoid(-delta);
        coefs.push((*pos, sigmoid(delta)));
    }

    if let Some(gbuf) = gbuf.as_deref_mut() {
        let mut d_rcon = vec![0.0; d];
        for (pos, coef) in coefs {
            let pid = tuple_param_ids[sup.tuples[pos] as usize];
            gbuf.add_b(pid, coef);
            {
                let row = params.r_row(pid);
                for i in 0..d {
                    d_rcon[i] += coef * row[i];
                }
            }
            let grow = gbuf.r_row_mut(pid);
            for i in 0..d {
                grow[i] += coef * r_con[i];
            }
        }
        backprop_context(params, feats, &d_rcon, gbuf);
    }
    loss
}

// ---------------------------------------------------------------------------
// Forward-backward
// ---------------------------------------------------------------------------

/// Row-stochastic transition matrix plus the distribution over the state at
/// the first production.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    pub k: usize,
    pub prior: Vec<f64>,
    pub trans: Vec<f64>,
}

impl TransitionModel {
    pub fn uniform(k: usize) -> TransitionModel {
        TransitionModel { k, prior: vec![1.0 / k as f64; k], trans: vec![1.0 / k as f64; k * k] }
    }
}

/// Exact unary and pairwise latent marginals.
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    pub k: usize,
    /// n x k.
    pub unary: Vec<f64>,
    /// (n-1) x k x k entries: q(i-1 state, i state).
    pub pairwise: Vec<f64>,
}

/// Log-space forward-backward over a latent chain with the given emission
/// log probabilities (n rows, k states). An all-minus-infinity column yields
/// log-likelihood -inf with uniform posteriors rather than an error.
pub fn forward_backward(
    emissions: &[f64],
    n: usize,
    tm: &TransitionModel,
) -> Result<(PosteriorTable, f64)> {
    let k = tm.k;
    if n == 0 || emissions.len() != n * k {
        return Err(Error::Config(format!(
            "emission matrix shape mismatch: {} entries for n={n}, k={k}",
            emissions.len()
        )));
    }
    let ln_prior: Vec<f64> = tm.prior.iter().map(|p| p.ln()).collect();
    let ln_trans: Vec<f64> = tm.trans.iter().map(|p| p.ln()).collect();

    let mut la = vec![f64::NEG_INFINITY; n * k];
    for s in 0..k {
        la[s] = ln_prior[s] + emissions[s];
    }
    let mut scratch = vec![0.0; k];
    for i in 1..n {
        for s in 0..k {
            for (p, sc) in scratch.iter_mut().enumerate() {
                *sc = la[(i - 1) * k + p] + ln_trans[p * k + s];
            }
            la[i * k + s] = log_sum_exp(&scratch) + emissions[i * k + s];
        }
    }
    let log_lik = log_sum_exp(&la[(n - 1) * k..n * k]);

    let uniform = 1.0 / k as f64;
    if log_lik == f64::NEG_INFINITY {
        return Ok((
            PosteriorTable {
                k,
                unary: vec![uniform; n * k],
                pairwise: vec![uniform * uniform; n.saturating_sub(1) * k * k],
            },
            f64::NEG_INFINITY,
        ));
    }

    let mut lb = vec![0.0; n * k];
    for i in (0..n - 1).rev() {
        for p in 0..k {
            for (s, sc) in scratch.iter_mut().enumerate() {
                *sc = ln_trans[p * k + s] + emissions[(i + 1) * k + s] + lb[(i + 1) * k + s];
            }
            lb[i * k + p] = log_sum_exp(&scratch);
        }
    }

    let mut unary = vec![0.0; n * k];
    for i in 0..n {
        for s in 0..k {
            unary[i * k + s] = (la[i * k + s] + lb[i * k + s] - log_lik).exp();
        }
    }
    let mut pairwise = vec![0.0; (n - 1) * k * k];
    for i in 1..n {
        for p in 0..k {
            for s in 0..k {
                pairwise[(i - 1) * k * k + p * k + s] = (la[(i - 1) * k + p]
                    + ln_trans[p * k + s]
                    + emissions[i * k + s]
                    + lb[i * k + s]
                    - log_lik)
                    .exp();
            }
        }
    }
    Ok((PosteriorTable { k, unary, pairwise }, log_lik))
}

/// Forward pass only, returning the per-step increments of the running log
/// marginal (they sum to the log-likelihood exactly).
pub fn forward_increments(emissions: &[f64], n: usize, tm: &TransitionModel) -> Vec<f64> {
    let k = tm.k;
    let ln_prior: Vec<f64> = tm.prior.iter().map(|p| p.ln()).collect();
    let ln_trans: Vec<f64> = tm.trans.iter().map(|p| p.ln()).collect();
    let mut prev = vec![f64::NEG_INFINITY; k];
    let mut increments = Vec::with_capacity(n);
    let mut running = 0.0;
    let mut scratch = vec![0.0; k];
    let mut cur = vec![0.0; k];
    for i in 0..n {
        for s in 0..k {
            if i == 0 {
                cur[s] = ln_prior[s] + emissions[s];
            } else {
                for (p, sc) in scratch.iter_mut().enumerate() {
                    *sc = prev[p] + ln_trans[p * k + s];
                }
                cur[s] = log_sum_exp(&scratch) + emissions[i * k + s];
            }
        }
        let z = log_sum_exp(&cur);
        increments.push(z - running);
        running = z;
        prev.copy_from_slice(&cur);
    }
    increments
}

// ---------------------------------------------------------------------------
// Vocabulary assembly
// ---------------------------------------------------------------------------

/// Register every key the tree variants may touch, in a deterministic
/// order: kinds, depth buckets, ancestor pairs (first occurrence in the
/// training records), universe tokens, tuple embeddings, scope features,
/// latent states.
pub fn build_tree_vocab(
    train_records: &[Vec<ProductionRecord>],
    support: &SupportTable,
    token_universe: &[(TokenKind, String)],
    with_scope: bool,
    latent_k: Option<usize>,
) -> Vocab {
    let mut vocab = Vocab::new();
    for kind in NodeKind::ALL {
        vocab.intern(RKey::Kind(AnnotatedKind::plain(*kind)));
    }
    if with_scope {
        vocab.intern(RKey::Kind(AnnotatedKind::tagged(NodeKind::IdentifierName, ScopeTag::Local)));
        vocab.intern(RKey::Kind(AnnotatedKind::tagged(NodeKind::IdentifierName, ScopeTag::Global)));
    }
    for d in 0..=DEPTH_CAP {
        vocab.intern(RKey::Depth(d as u8));
    }
    for records in train_records {
        for rec in records {
            let n = rec.ctx.ancestors.len();
            for (kind, idx) in &rec.ctx.ancestors[..n] {
                vocab.intern(RKey::Ancestor(*kind, (*idx).min(crate::trace::CHILD_INDEX_CAP) as u8));
            }
        }
    }
    for (kind, text) in token_universe {
        vocab.intern(RKey::Token(*kind, text.clone()));
    }
    for id in 0..support.tuples.len() {
        vocab.intern(RKey::Tuple(id as u32));
    }
    if with_scope {
        for ty in ["int", "bool", "string", "int[]"] {
            vocab.intern(RKey::TypeFeat(ty.to_string()));
        }
        for r in 0..=RANK_CAP {
            vocab.intern(RKey::DeclRank(r as u8));
            vocab.intern(RKey::AssignRank(r as u8));
        }
    }
    if let Some(k) = latent_k {
        for s in 0..k {
            vocab.intern(RKey::Latent(s as u16));
        }
    }
    vocab
}

pub fn tuple_param_ids(vocab: &Vocab, tuples: &TupleTable) -> Vec<u32> {
    (0..tuples.len())
        .map(|id| vocab.get(&RKey::Tuple(id as u32)).expect("tuple keys registered"))
        .collect()
}

// ---------------------------------------------------------------------------
// The minibatch engine and trainers
// ---------------------------------------------------------------------------

pub struct EpochStats {
    pub train_loss_bits: f64,
    pub items: usize,
}

/// One pass of minibatched AdaGrad updates over the given item indices
/// (already grouped per databatch and shuffled by the caller).
#[allow(clippy::too_many_arguments)]
fn run_minibatches(
    params: &mut ParamStore,
    opt: &mut AdaGradState,
    gbuf: &mut GradBuf,
    support: &SupportTable,
    tuple_pids: &[u32],
    items: &[TrainItem],
    order: &[usize],
    cfg: &TrainConfig,
    noise: Option<(&NoiseTable, &mut ChaCha8Rng)>,
) -> f64 {
    let mut total_loss = 0.0;
    let mut noise = noise;
    for chunk in order.chunks(cfg.minibatch.max(1)) {
        for idx in chunk {
            let item = &items[*idx];
            let loss = match (&mut noise, item) {
                (Some((table, rng)), TrainItem::Tuple { parent_idx, feats, target_pos }) => {
                    let dist = &table.per_parent[*parent_idx];
                    let draws: Vec<usize> = (0..cfg.nce_k).map(|_| dist.sample(rng)).collect();
                    nce_item_loss(
                        params,
                        tuple_pids,
                        support,
                        *parent_idx,
                        feats,
                        *target_pos,
                        dist,
                        &draws,
                        Some(gbuf),
                    )
                }
                _ => exact_item_loss(params, tuple_pids, support, item, Some(gbuf)),
            };
            total_loss += loss;
        }
        let scale = 1.0 / chunk.len() as f64;
        gbuf.apply(params, opt, scale, cfg.learning_rate, cfg.adagrad_epsilon);
    }
    total_loss
}

/// Exact-ML (or NCE) training of the deterministic-variable variants. For
/// latent variants trained through this path the latent state is observed
/// as 0, the degenerate K=1 chain.
pub fn train_lbl_tree(
    train_trees: &[Tree],
    universe_trees: &[Tree],
    valid_trees: Option<&[Tree]>,
    cfg: &TrainConfig,
) -> Result<LttModel> {
    cfg.validate()?;
    let with_scope = cfg.variant.uses_scope();
    let records = extract_all(train_trees, with_scope)?;
    let assets = build_assets(&records, universe_trees, with_scope)?;
    let latent_k = if cfg.variant.has_latent() { Some(1) } else { None };
    let token_universe: Vec<(TokenKind, String)> =
        assets.default_model.token_counts.keys().cloned().collect();
    let vocab = build_tree_vocab(&records, &assets.support, &token_universe, with_scope, latent_k);
    let slots = cfg.variant.context_slots();
    let mut params = ParamStore::init(vocab, slots, cfg.dim, cfg.seed);
    let tuple_pids = tuple_param_ids(&params.vocab, &assets.support.tuples);
    let mut opt = AdaGradState::new(&params, latent_k.unwrap_or(0));
    let mut gbuf = GradBuf::new(&params);

    let latent = latent_k.map(|_| 0usize);
    let per_tree_items: Vec<Vec<TrainItem>> = records
        .iter()
        .map(|recs| {
            recs.iter()
                .filter_map(|r| build_item(r, latent, &params, &assets.support))
                .collect()
        })
        .collect();

    let valid_records = match valid_trees {
        Some(trees) => Some(extract_all(trees, with_scope)?),
        None => None,
    };

    let smoothing = SmoothingConfig {
        pi: *cfg.pi_grid.first().unwrap_or(&0.98),
        alpha: *cfg.alpha_grid.first().unwrap_or(&0.2),
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_items = 0usize;
        let mut item_buf: Vec<TrainItem> = Vec::new();
        for (db_idx, db) in per_tree_items.chunks(cfg.databatch.max(1)).enumerate() {
            item_buf.clear();
            for tree_items in db {
                item_buf.extend(tree_items.iter().cloned());
            }
            let mut order: Vec<usize> = (0..item_buf.len()).collect();
            let mut rng = rng_for(cfg.seed, TAG_SHUFFLE, epoch as u64, db_idx as u64);
            shuffle(&mut order, &mut rng);
            let noise_table;
            let noise = match cfg.trainer {
                TrainerKind::Exact => None,
                TrainerKind::Nce => {
                    noise_table = build_noise_table(&assets.support, 0.5);
                    Some(noise_table)
                }
            };
            let mut nce_rng = rng_for(cfg.seed, TAG_NCE, epoch as u64, db_idx as u64);
            epoch_loss += run_minibatches(
                &mut params,
                &mut opt,
                &mut gbuf,
                &assets.support,
                &tuple_pids,
                &item_buf,
                &order,
                cfg,
                noise.as_ref().map(|t| (t, &mut nce_rng)),
            );
            epoch_items += item_buf.len();
        }
        let _ = (epoch_loss, epoch_items);

        if let (Some(valid), true) = (&valid_records, cfg.patience > 0) {
            let model_view = LttModel {
                variant: cfg.variant,
                params: params.clone(),
                support: assets.support.clone(),
                default_model: assets.default_model.clone(),
                smoothing,
                latent: latent_k.map(LatentChain::new),
                tuple_param_ids: tuple_pids.clone(),
            };
            let bits = valid_bits(&model_view, valid)?;
            let improved = best.as_ref().map(|(b, _)| bits < *b).unwrap_or(true);
            if improved {
                best = Some((bits, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, best_params)) = best {
        params = best_params;
    }

    let mut model = LttModel {
        variant: cfg.variant,
        params,
        support: assets.support,
        default_model: assets.default_model,
        smoothing,
        latent: latent_k.map(LatentChain::new),
        tuple_param_ids: tuple_pids,
    };
    if let Some(valid) = &valid_records {
        grid_search_smoothing(&mut model, valid, &cfg.pi_grid, &cfg.alpha_grid)?;
    }
    Ok(model)
}

/// EM training of a latent-variable variant: per databatch, forward-backward
/// per tree, a sampled incremental M step on the productions, and stochastic
/// gradient updates of the tabular transitions.
pub fn em_train(
    train_trees: &[Tree],
    universe_trees: &[Tree],
    valid_trees: Option<&[Tree]>,
    cfg: &TrainConfig,
) -> Result<LttModel> {
    cfg.validate()?;
    if !cfg.variant.has_latent() {
        return Err(Error::Config(format!(
            "variant {} has no latent traversal variable",
            cfg.variant
        )));
    }
    let k = cfg.latent_states;
    let with_scope = false;
    let records = extract_all(train_trees, with_scope)?;
    let assets = build_assets(&records, universe_trees, with_scope)?;
    let token_universe: Vec<(TokenKind, String)> =
        assets.default_model.token_counts.keys().cloned().collect();
    let vocab = build_tree_vocab(&records, &assets.support, &token_universe, with_scope, Some(k));
    let slots = cfg.variant.context_slots();
    let mut params = ParamStore::init(vocab, slots, cfg.dim, cfg.seed);
    let tuple_pids = tuple_param_ids(&params.vocab, &assets.support.tuples);
    let mut opt = AdaGradState::new(&params, k);
    let mut gbuf = GradBuf::new(&params);
    let mut chain = LatentChain::new(k);

    let valid_records = match valid_trees {
        Some(trees) => Some(extract_all(trees, with_scope)?),
        None => None,
    };
    let smoothing = SmoothingConfig {
        pi: *cfg.pi_grid.first().unwrap_or(&0.98),
        alpha: *cfg.alpha_grid.first().unwrap_or(&0.2),
    };

    let mut best: Option<(f64, ParamStore, LatentChain)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        for (db_idx, db) in records.chunks(cfg.databatch.max(1)).enumerate() {
            // E step.
            let tm = TransitionModel { k, prior: chain.prior(), trans: chain.transitions() };
            let mut latents: Vec<Vec<usize>> = Vec::with_capacity(db.len());
            let mut trans_grad = vec![0.0; k * k];
            let mut prior_grad = vec![0.0; k];
            let mut rng = rng_for(cfg.seed, TAG_LATENT, epoch as u64, db_idx as u64);
            for tree_records in db {
                let n = tree_records.len();
                let emissions = emission_matrix(&params, &tuple_pids, &assets.support, tree_records, k)?;
                let (post, _ll) = forward_backward(&emissions, n, &tm)?;
                // Sample one latent value per position from its marginal.
                let mut states = Vec::with_capacity(n);
                for i in 0..n {
                    let row = &post.unary[i * k..(i + 1) * k];
                    let s = if k == 1 { 0 } else { sample_categorical(row, &mut rng) };
                    states.push(s);
                }
                latents.push(states);
                // Expected-count gradients for the tabular chain (ascent
                // direction negated: the engine minimizes).
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
            }

            // Incremental M step on the sampled observed-latent productions.
            let mut items: Vec<TrainItem> = Vec::new();
            for (tree_records, states) in db.iter().zip(&latents) {
                for (rec, state) in tree_records.iter().zip(states) {
                    if let Some(item) = build_item(rec, Some(*state), &params, &assets.support) {
                        items.push(item);
                    }
                }
            }
            let mut order: Vec<usize> = (0..items.len()).collect();
            let mut rng = rng_for(cfg.seed, TAG_SHUFFLE, epoch as u64, db_idx as u64);
            shuffle(&mut order, &mut rng);
            run_minibatches(
                &mut params,
                &mut opt,
                &mut gbuf,
                &assets.support,
                &tuple_pids,
                &items,
                &order,
                cfg,
                None,
            );
            adagrad_apply(
                &mut chain.trans_logits,
                &mut opt.trans,
                &trans_grad,
                cfg.learning_rate,
                cfg.adagrad_epsilon,
            );
            adagrad_apply(
                &mut chain.prior_logits,
                &mut opt.prior,
                &prior_grad,
                cfg.learning_rate,
                cfg.adagrad_epsilon,
            );
        }

        if let (Some(valid), true) = (&valid_records, cfg.patience > 0) {
            let model_view = LttModel {
                variant: cfg.variant,
                params: params.clone(),
                support: assets.support.clone(),
                default_model: assets.default_model.clone(),
                smoothing,
                latent: Some(chain.clone()),
                tuple_param_ids: tuple_pids.clone(),
            };
            let bits = valid_bits(&model_view, valid)?;
            let improved = best.as_ref().map(|(b, _, _)| bits < *b).unwrap_or(true);
            if improved {
                best = Some((bits, params.clone(), chain.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, bp, bc)) = best {
        params = bp;
        chain = bc;
    }

    let mut model = LttModel {
        variant: cfg.variant,
        params,
        support: assets.support,
        default_model: assets.default_model,
        smoothing,
        latent: Some(chain),
        tuple_param_ids: tuple_pids,
    };
    if let Some(valid) = &valid_records {
        grid_search_smoothing(&mut model, valid, &cfg.pi_grid, &cfg.alpha_grid)?;
    }
    Ok(model)
}

/// Base-model emission log-probabilities for one tree: n rows, k states.
pub fn emission_matrix(
    params: &ParamStore,
    tuple_pids: &[u32],
    support: &SupportTable,
    tree_records: &[ProductionRecord],
    k: usize,
) -> Result<Vec<f64>> {
    let n = tree_records.len();
    let mut out = vec![f64::NEG_INFINITY; n * k];
    for (i, rec) in tree_records.iter().enumerate() {
        for s in 0..k {
            let Some(item) = build_item(rec, Some(s), params, support) else {
                return Err(Error::Model(format!(
                    "production at step {} outside the training support",
                    rec.step
                )));
            };
            out[i * k + s] = -exact_item_loss(params, tuple_pids, support, &item, None);
        }
    }
    Ok(out)
}

pub(crate) fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
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

/// Fisher-Yates with our deterministic stream.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

fn extract_all(trees: &[Tree], with_scope: bool) -> Result<Vec<Vec<ProductionRecord>>> {
    trees.iter().map(|t| extract_records(t, with_scope)).collect()
}

/// Total smoothed log2 probability per token over a record set; used for
/// early stopping and the smoothing grid.
fn valid_bits(model: &LttModel, records: &[Vec<ProductionRecord>]) -> Result<f64> {
    let mut total_ln = 0.0;
    let mut count = 0usize;
    for tree_records in records {
        total_ln += tree_ln_prob(model, tree_records)?;
        count += tree_records.len();
    }
    // Negated so smaller = better for the early-stopping comparisons.
    Ok(-total_ln / std::f64::consts::LN_2 / count.max(1) as f64)
}

/// Smoothed log probability of one tree's production sequence under the
/// model (forward-marginalized for latent variants).
pub fn tree_ln_prob(model: &LttModel, tree_records: &[ProductionRecord]) -> Result<f64> {
    match &model.latent {
        None => {
            let mut total = 0.0;
            for rec in tree_records {
                total += model.smoothed_log_prob(rec, None)?;
            }
            Ok(total)
        }
        Some(chain) => {
            let k = chain.k;
            let n = tree_records.len();
            let mut emissions = vec![f64::NEG_INFINITY; n * k];
            for (i, rec) in tree_records.iter().enumerate() {
                for s in 0..k {
                    emissions[i * k + s] = model.smoothed_log_prob(rec, Some(s))?;
                }
            }
            let tm = TransitionModel { k, prior: chain.prior(), trans: chain.transitions() };
            let (_post, ll) = forward_backward(&emissions, n, &tm)?;
            Ok(ll)
        }
    }
}

/// Choose (pi, alpha) on validation data by coarse grid search; ties keep
/// the earliest grid entry.
pub fn grid_search_smoothing(
    model: &mut LttModel,
    valid_records: &[Vec<ProductionRecord>],
    pi_grid: &[f64],
    alpha_grid: &[f64],
) -> Result<()> {
    let mut best: Option<(f64, SmoothingConfig)> = None;
    for alpha in alpha_grid {
        for pi in pi_grid {
            let cand = SmoothingConfig { pi: *pi, alpha: *alpha };
            model.smoothing = cand;
            let bits = valid_bits(model, valid_records)?;
            if best.as_ref().map(|(b, _)| bits < *b).unwrap_or(true) {
                best = Some((bits, cand));
            }
        }
    }
    if let Some((_, cfg)) = best {
        model.smoothing = cfg;
    }
    Ok(())
}

/// Top-level training dispatch for the tree variants.
pub fn train_tree_variant(
    train_trees: &[Tree],
    universe_trees: &[Tree],
    valid_trees: Option<&[Tree]>,
    cfg: &TrainConfig,
) -> Result<LttModel> {
    match cfg.variant {
        Variant::LttLatent => em_train(train_trees, universe_trees, valid_trees, cfg),
        v if v.is_lbl_tree() => train_lbl_tree(train_trees, universe_trees, valid_trees, cfg),
        v => Err(Error::Config(format!("{v} is not a log-bilinear tree variant"))),
    }
}
