//! Model files: a JSON manifest (version, variant, vocabularies, support,
//! counts) followed by raw little-endian 64-bit float blocks in id order.
//! The exact layout is documented in docs/model-format.md.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ast::{AnnotatedKind, Symbol, TokenKind, TupleKey};
use crate::baselines::{
    ContextCounts, LblHmmModel, LblNgramModel, NgramModel, PcfgModel, SeqSym, TokenCandidates,
};
use crate::error::{Error, Result};
use crate::eval::Model;
use crate::model::{
    DefaultModel, LatentChain, LttModel, ParamStore, ParentSupport, RKey, SmoothingConfig,
    SupportTable, Vocab,
};
use crate::train::AdaGradState;
use crate::variant::{SlotKind, Variant};

pub const MAGIC: &[u8; 8] = b"LTTMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SupportEntry {
    parent: AnnotatedKind,
    tuples: Vec<u32>,
    counts: Vec<u64>,
    token_only: bool,
    lambda: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize, Default)]
struct NgramPayload {
    order: usize,
    alpha: f64,
    vocab: Vec<SeqSym>,
    contexts: Vec<(Vec<i64>, ContextCounts)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum Payload {
    None,
    Ngram(NgramPayload),
    Pcfg { count_alpha: f64 },
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    format_version: u32,
    variant: String,
    dim: usize,
    pi: f64,
    alpha: f64,
    slots: Vec<SlotKind>,
    vocab: Vec<RKey>,
    tuples: Vec<TupleKey>,
    supports: Vec<SupportEntry>,
    token_counts: Vec<(TokenKind, String, u64)>,
    token_total: u64,
    symbol_counts: Vec<(Symbol, u64)>,
    symbol_total: u64,
    latent_k: Option<usize>,
    payload: Payload,
    blocks: Vec<BlockInfo>,
}

fn support_entries(table: &SupportTable) -> Vec<SupportEntry> {
    table
        .parents
        .iter()
        .map(|(parent, sup)| SupportEntry {
            parent: *parent,
            tuples: sup.tuples.clone(),
            counts: sup.counts.clone(),
            token_only: sup.token_only,
            lambda: sup.lambda,
        })
        .collect()
}

fn rebuild_support(tuples: Vec<TupleKey>, entries: Vec<SupportEntry>) -> SupportTable {
    let mut table = SupportTable::default();
    for t in tuples {
        table.tuples.intern(t);
    }
    for e in entries {
        let lookup = e
            .tuples
            .iter()
            .enumerate()
            .map(|(pos, tid)| (*tid, pos as u32))
            .collect();
        table.parents.insert(
            e.parent,
            ParentSupport {
                total: e.counts.iter().sum(),
                tuples: e.tuples,
                counts: e.counts,
                token_only: e.token_only,
                lambda: e.lambda,
                lookup,
            },
        );
    }
    table
}

fn default_model_fields(dm: &DefaultModel) -> (Vec<(TokenKind, String, u64)>, Vec<(Symbol, u64)>) {
    (
        dm.token_counts.iter().map(|((k, t), c)| (*k, t.clone(), *c)).collect(),
        dm.symbol_counts.iter().map(|(s, c)| (s.clone(), *c)).collect(),
    )
}

fn rebuild_default_model(
    token_counts: Vec<(TokenKind, String, u64)>,
    token_total: u64,
    symbol_counts: Vec<(Symbol, u64)>,
    symbol_total: u64,
) -> DefaultModel {
    let mut dm = DefaultModel { token_total, symbol_total, ..Default::default() };
    for (k, t, c) in token_counts {
        dm.token_counts.insert((k, t), c);
    }
    for (s, c) in symbol_counts {
        dm.symbol_counts.insert(s, c);
    }
    dm
}

fn f64s_to_bytes(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Serialize a model (optionally with optimizer accumulators, for training
/// checkpoints) into the envelope byte format.
pub fn model_to_bytes(model: &Model, optimizer: Option<&AdaGradState>) -> Result<Vec<u8>> {
    let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
    let mut header = ModelHeader {
        format: "ltt-model".to_string(),
        format_version: FORMAT_VERSION,
        variant: model.variant().id(),
        dim: 0,
        pi: 1.0,
        alpha: 0.0,
        slots: Vec::new(),
        vocab: Vec::new(),
        tuples: Vec::new(),
        supports: Vec::new(),
        token_counts: Vec::new(),
        token_total: 0,
        symbol_counts: Vec::new(),
        symbol_total: 0,
        latent_k: None,
        payload: Payload::None,
        blocks: Vec::new(),
    };

    let mut push_params = |header: &mut ModelHeader, params: &ParamStore| {
        header.dim = params.dim;
        header.slots = params.slots.clone();
        header.vocab = params.vocab.iter().map(|(k, _)| k.clone()).collect();
        blocks.push(("r".to_string(), params.r.clone()));
        blocks.push(("b".to_string(), params.b.clone()));
        blocks.push(("wcon".to_string(), params.wcon.clone()));
        blocks.push(("wch".to_string(), params.wch.clone()));
    };

    match model {
        Model::Ltt(m) => {
            push_params(&mut header, &m.params);
            header.pi = m.smoothing.pi;
            header.alpha = m.smoothing.alpha;
            header.tuples = m.support.tuples.iter().map(|(k, _)| k.clone()).collect();
            header.supports = support_entries(&m.support);
            let (tc, sc) = default_model_fields(&m.default_model);
            header.token_counts = tc;
            header.symbol_counts = sc;
            header.token_total = m.default_model.token_total;
            header.symbol_total = m.default_model.symbol_total;
            if let Some(chain) = &m.latent {
                header.latent_k = Some(chain.k);
                blocks.push(("trans_logits".to_string(), chain.trans_logits.clone()));
                blocks.push(("prior_logits".to_string(), chain.prior_logits.clone()));
            }
        }
        Model::Pcfg(m) => {
            header.pi = m.smoothing.pi;
            header.alpha = m.smoothing.alpha;
            header.tuples = m.support.tuples.iter().map(|(k, _)| k.clone()).collect();
            header.supports = support_entries(&m.support);
            let (tc, sc) = default_model_fields(&m.default_model);
            header.token_counts = tc;
            header.symbol_counts = sc;
            header.token_total = m.default_model.token_total;
            header.symbol_total = m.default_model.symbol_total;
            header.payload = Payload::Pcfg { count_alpha: m.count_alpha };
        }
        Model::Ngram(m) => {
            header.payload = Payload::Ngram(NgramPayload {
                order: m.order,
                alpha: m.alpha,
                vocab: m.vocab.iter().map(|(k, _)| k.clone()).collect(),
                contexts: m.contexts.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            });
        }
        Model::LblNgram(m) => {
            push_params(&mut header, &m.params);
        }
        Model::LblHmm(m) => {
            push_params(&mut header, &m.params);
            header.latent_k = Some(m.k);
            blocks.push(("trans_logits".to_string(), m.chain.trans_logits.clone()));
            blocks.push(("prior_logits".to_string(), m.chain.prior_logits.clone()));
        }
    }

    if let Some(opt) = optimizer {
        blocks.push(("opt_r".to_string(), opt.r.clone()));
        blocks.push(("opt_b".to_string(), opt.b.clone()));
        blocks.push(("opt_wcon".to_string(), opt.wcon.clone()));
        blocks.push(("opt_wch".to_string(), opt.wch.clone()));
        blocks.push(("opt_trans".to_string(), opt.trans.clone()));
        blocks.push(("opt_prior".to_string(), opt.prior.clone()));
    }

    header.blocks = blocks
        .iter()
        .map(|(name, data)| BlockInfo { name: name.clone(), len: data.len() as u64 })
        .collect();

    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::ModelFile(format!("header serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, data) in &blocks {
        f64s_to_bytes(data, &mut out);
    }
    Ok(out)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = model_to_bytes(model, None)?;
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let fail = |msg: &str| Error::ModelFile(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a model file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::ModelFile(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err(fail("truncated header"));
    }
    let header: ModelHeader = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::ModelFile(format!("header parse failed: {e}")))?;

    let mut offset = header_end;
    let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
    for info in &header.blocks {
        let nbytes = info.len as usize * 8;
        if bytes.len() < offset + nbytes {
            return Err(fail("truncated block data"));
        }
        blocks.push((info.name.clone(), bytes_to_f64s(&bytes[offset..offset + nbytes])));
        offset += nbytes;
    }
    let block = |name: &str| -> Result<Vec<f64>> {
        blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.clone())
            .ok_or_else(|| Error::ModelFile(format!("missing block {name:?}")))
    };

    let variant = Variant::parse_id(&header.variant)?;
    let rebuild_params = |header: &ModelHeader| -> Result<ParamStore> {
        let mut vocab = Vocab::new();
        for k in &header.vocab {
            vocab.intern(k.clone());
        }
        Ok(ParamStore {
            dim: header.dim,
            vocab,
            slots: header.slots.clone(),
            r: block("r")?,
            b: block("b")?,
            wcon: block("wcon")?,
            wch: block("wch")?,
        })
    };

    let model = match variant {
        Variant::Pcfg => {
            let Payload::Pcfg { count_alpha } = header.payload else {
                return Err(fail("pcfg payload missing"));
            };
            Model::Pcfg(PcfgModel {
                support: rebuild_support(header.tuples, header.supports),
                default_model: rebuild_default_model(
                    header.token_counts,
                    header.token_total,
                    header.symbol_counts,
                    header.symbol_total,
                ),
                smoothing: SmoothingConfig { pi: header.pi, alpha: header.alpha },
                count_alpha,
            })
        }
        Variant::Ngram(_) => {
            let Payload::Ngram(p) = header.payload else {
                return Err(fail("ngram payload missing"));
            };
            let mut vocab = indexmap::IndexMap::new();
            for (i, sym) in p.vocab.into_iter().enumerate() {
                vocab.insert(sym, i as u32);
            }
            Model::Ngram(NgramModel {
                order: p.order,
                alpha: p.alpha,
                vocab,
                contexts: p.contexts.into_iter().collect(),
            })
        }
        Variant::LblNgram10 => {
            let params = rebuild_params(&header)?;
            let universe = token_universe_of(&params.vocab);
            let candidates = TokenCandidates::build(&params.vocab, &universe);
            Model::LblNgram(LblNgramModel { order: 10, params, candidates })
        }
        Variant::LblHmm => {
            let params = rebuild_params(&header)?;
            let k = header.latent_k.ok_or_else(|| fail("latent_k missing"))?;
            let universe = token_universe_of(&params.vocab);
            let candidates = TokenCandidates::build(&params.vocab, &universe);
            let chain = LatentChain {
                k,
                trans_logits: block("trans_logits")?,
                prior_logits: block("prior_logits")?,
            };
            Model::LblHmm(LblHmmModel { k, params, candidates, chain })
        }
        _ => {
            let params = rebuild_params(&header)?;
            let support = rebuild_support(header.tuples, header.supports);
            let default_model = rebuild_default_model(
                header.token_counts,
                header.token_total,
                header.symbol_counts,
                header.symbol_total,
            );
            let latent = match header.latent_k {
                Some(k) => Some(LatentChain {
                    k,
                    trans_logits: block("trans_logits")?,
                    prior_logits: block("prior_logits")?,
                }),
                None => None,
            };
            let tuple_param_ids = crate::train::tuple_param_ids(&params.vocab, &support.tuples);
            Model::Ltt(LttModel {
                variant,
                params,
                support,
                default_model,
                smoothing: SmoothingConfig { pi: header.pi, alpha: header.alpha },
                latent,
                tuple_param_ids,
            })
        }
    };
    Ok(model)
}

fn token_universe_of(vocab: &Vocab) -> Vec<(TokenKind, String)> {
    vocab
        .iter()
        .filter_map(|(k, _)| match k {
            RKey::Token(kind, text) => Some((*kind, text.clone())),
            _ => None,
        })
        .collect()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let mut f = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Data(format!("cannot open model {}: {e}", path.as_ref().display())))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{train_lbl_hmm, train_ngram, train_pcfg};
    use crate::eval::eval_corpus;
    use crate::minilang::parse;
    use crate::train::{train_lbl_tree, TrainConfig};
    use crate::ast::Tree;

    fn corpus() -> Vec<Tree> {
        [
            "fn f() { int a = 0; a = a + 1; return a; }",
            "fn g(int x) { if (x < 2) { return x; } return 0; }",
        ]
        .iter()
        .map(|s| parse(s).unwrap())
        .collect()
    }

    fn assert_round_trip(model: Model, trees: &[Tree]) {
        let before = eval_corpus(&model, trees).unwrap();
        let bytes = model_to_bytes(&model, None).unwrap();
        let loaded = model_from_bytes(&bytes).unwrap();
        let after = eval_corpus(&loaded, trees).unwrap();
        assert!(
            (before.total_bits - after.total_bits).abs() < 1e-12,
            "{}: {} vs {}",
            before.variant,
            before.total_bits,
            after.total_bits
        );
        // Serialization itself is reproducible byte for byte.
        let again = model_to_bytes(&loaded, None).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn ltt_round_trips_and_preserves_bits() {
        let trees = corpus();
        let cfg = TrainConfig {
            variant: crate::variant::Variant::LttHiSeqScope,
            dim: 6,
            epochs: 2,
            patience: 0,
            ..TrainConfig::default()
        };
        let m = train_lbl_tree(&trees, &trees, None, &cfg).unwrap();
        assert_round_trip(Model::Ltt(m), &trees);
    }

    #[test]
    fn pcfg_and_ngram_round_trip() {
        let trees = corpus();
        let cfg = TrainConfig::default();
        let pcfg = train_pcfg(&trees, &trees, None, &cfg).unwrap();
        assert_round_trip(Model::Pcfg(pcfg), &trees);
        let ngram = train_ngram(&trees, &trees, None, 3, &[0.3]).unwrap();
        assert_round_trip(Model::Ngram(ngram), &trees);
    }

    #[test]
    fn hmm_round_trips() {
        let trees = corpus();
        let cfg = TrainConfig {
            latent_states: 2,
            dim: 4,
            epochs: 2,
            patience: 0,
            ..TrainConfig::default()
        };
        let m = train_lbl_hmm(&trees, &trees, None, &cfg).unwrap();
        assert_round_trip(Model::LblHmm(m), &trees);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(matches!(model_from_bytes(b"NOTAMODEL"), Err(Error::ModelFile(_))));
    }
}
