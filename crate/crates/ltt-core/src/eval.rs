//! Held-out evaluation: log probabilities per token (base 2) and the
//! per-parent-kind breakdowns.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::Serialize;

use crate::ast::Tree;
use crate::baselines::{LblHmmModel, LblNgramModel, NgramModel, PcfgModel};
use crate::error::{Error, Result};
use crate::model::LttModel;
use crate::trace::extract_records;
use crate::train::{forward_increments, TransitionModel};
use crate::variant::Variant;

/// Any trained model the toolkit can evaluate or persist.
#[derive(Debug, Clone)]
pub enum Model {
    Ltt(LttModel),
    Pcfg(PcfgModel),
    Ngram(NgramModel),
    LblNgram(LblNgramModel),
    LblHmm(LblHmmModel),
}

impl Model {
    pub fn variant(&self) -> Variant {
        match self {
            Model::Ltt(m) => m.variant,
            Model::Pcfg(_) => Variant::Pcfg,
            Model::Ngram(m) => Variant::Ngram(m.order),
            Model::LblNgram(_) => Variant::LblNgram10,
            Model::LblHmm(_) => Variant::LblHmm,
        }
    }

    pub fn is_tree_model(&self) -> bool {
        self.variant().is_tree_model()
    }
}

const LN_2: f64 = std::f64::consts::LN_2;

/// One row of the per-parent breakdown. Bits are signed log2 probabilities
/// (negative); the share is this row's fraction of the total cost.
#[derive(Debug, Clone, Serialize)]
pub struct ParentRow {
    pub parent: String,
    pub bits: f64,
    pub share_pct: f64,
    pub count: u64,
}

/// The evaluation report. All bit quantities are log2 probabilities, so
/// they are negative; closer to zero is better.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub program_count: usize,
    pub token_count: usize,
    pub total_bits: f64,
    /// Corpus-total bits divided by corpus-total tokens (headline figure).
    pub bits_per_token: f64,
    /// Mean over programs of each program's bits-per-token ratio.
    pub mean_program_bits_per_token: f64,
    pub token_bits: f64,
    pub tree_bits: f64,
    pub per_parent: Vec<ParentRow>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "variant: {}", self.variant)?;
        writeln!(f, "programs: {}  tokens: {}", self.program_count, self.token_count)?;
        writeln!(f, "total log2 probability: {:.3}", self.total_bits)?;
        writeln!(f, "log2 probability per token: {:.4}", self.bits_per_token)?;
        writeln!(
            f,
            "mean per-program log2 probability per token: {:.4}",
            self.mean_program_bits_per_token
        )?;
        writeln!(f, "token cost: {:.3}  tree cost: {:.3}", self.token_bits, self.tree_bits)?;
        writeln!(f, "{:<34} {:>12} {:>8} {:>8}", "parent kind", "bits", "share%", "count")?;
        for row in &self.per_parent {
            writeln!(
                f,
                "{:<34} {:>12.3} {:>8.2} {:>8}",
                row.parent, row.bits, row.share_pct, row.count
            )?;
        }
        Ok(())
    }
}

struct CostRow {
    label: String,
    token_cost: bool,
    ln_p: f64,
}

struct TreeCosts {
    rows: Vec<CostRow>,
    tokens: usize,
}

fn ltt_tree_costs(model: &LttModel, tree: &Tree) -> Result<TreeCosts> {
    let records = extract_records(tree, model.variant.uses_scope())?;
    let mut rows = Vec::with_capacity(records.len());
    match &model.latent {
        None => {
            for rec in &records {
                rows.push(CostRow {
                    label: rec.parent.to_string(),
                    token_cost: rec.tuple.iter().all(|s| s.is_token()),
                    ln_p: model.smoothed_log_prob(rec, None)?,
                });
            }
        }
        Some(chain) => {
            // Forward increments decompose the chain log-likelihood exactly
            // across production steps.
            let k = chain.k;
            let n = records.len();
            let mut emissions = vec![f64::NEG_INFINITY; n * k];
            for (i, rec) in records.iter().enumerate() {
                for s in 0..k {
                    emissions[i * k + s] = model.smoothed_log_prob(rec, Some(s))?;
                }
            }
            let tm = TransitionModel { k, prior: chain.prior(), trans: chain.transitions() };
            let inc = forward_increments(&emissions, n, &tm);
            for (rec, ln_p) in records.iter().zip(inc) {
                rows.push(CostRow {
                    label: rec.parent.to_string(),
                    token_cost: rec.tuple.iter().all(|s| s.is_token()),
                    ln_p,
                });
            }
        }
    }
    Ok(TreeCosts { rows, tokens: tree.token_count() })
}

fn pcfg_tree_costs(model: &PcfgModel, tree: &Tree) -> Result<TreeCosts> {
    let records = extract_records(tree, false)?;
    let rows = records
        .iter()
        .map(|rec| {
            Ok(CostRow {
                label: rec.parent.to_string(),
                token_cost: rec.tuple.iter().all(|s| s.is_token()),
                ln_p: model.record_ln_prob(rec)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TreeCosts { rows, tokens: tree.token_count() })
}

const TOKEN_ROW: &str = "<tokens>";

fn seq_tree_costs(model: &Model, tree: &Tree) -> Result<TreeCosts> {
    let ln_probs: Vec<f64> = match model {
        Model::Ngram(m) => {
            let stream = m.encode(tree)?;
            m.stream_ln_probs(&stream)
        }
        Model::LblNgram(m) => {
            let stream = m.encode(tree)?;
            m.stream_ln_probs(&stream)
        }
        Model::LblHmm(m) => {
            let stream = m.encode(tree)?;
            m.stream_ln_increments(&stream)
        }
        _ => unreachable!("tree models handled elsewhere"),
    };
    let rows = ln_probs
        .into_iter()
        .map(|ln_p| CostRow { label: TOKEN_ROW.to_string(), token_cost: true, ln_p })
        .collect();
    Ok(TreeCosts { rows, tokens: tree.token_count() })
}

fn tree_costs(model: &Model, tree: &Tree) -> Result<TreeCosts> {
    // Closed-vocabulary check: tokens outside the model's universe are a
    // data error rather than a silent zero.
    let knows = |kind, text: &str| match model {
        Model::Ltt(m) => m.default_model.knows_token(kind, text),
        Model::Pcfg(m) => m.default_model.knows_token(kind, text),
        Model::Ngram(m) => m.knows_token(kind, text),
        Model::LblNgram(m) => m.knows_token(kind, text),
        Model::LblHmm(m) => m.knows_token(kind, text),
    };
    for tok in tree.tokens() {
        if !knows(tok.kind, &tok.text) {
            return Err(Error::Eval(format!(
                "token {:?} ({}) absent from the model's token universe",
                tok.text,
                tok.kind.as_str()
            )));
        }
    }
    match model {
        Model::Ltt(m) => ltt_tree_costs(m, tree),
        Model::Pcfg(m) => pcfg_tree_costs(m, tree),
        _ => seq_tree_costs(model, tree),
    }
}

/// Score a corpus and aggregate the report. Per-program scoring runs in
/// parallel; the reduction is sequential in corpus order, so reports are
/// reproducible regardless of thread count.
pub fn eval_corpus(model: &Model, trees: &[Tree]) -> Result<EvalReport> {
    if trees.is_empty() {
        return Err(Error::Data("empty evaluation corpus".to_string()));
    }
    let per_tree: Vec<Result<TreeCosts>> =
        trees.par_iter().map(|tree| tree_costs(model, tree)).collect();

    let mut total_bits = 0.0;
    let mut token_bits = 0.0;
    let mut tree_bits = 0.0;
    let mut token_count = 0usize;
    let mut ratio_sum = 0.0;
    let mut groups: IndexMap<String, (f64, u64)> = IndexMap::new();

    for costs in per_tree {
        let costs = costs?;
        let mut program_bits = 0.0;
        for row in &costs.rows {
            let bits = row.ln_p / LN_2;
            program_bits += bits;
            if row.token_cost {
                token_bits += bits;
            } else {
                tree_bits += bits;
            }
            let entry = groups.entry(row.label.clone()).or_insert((0.0, 0));
            entry.0 += bits;
            entry.1 += 1;
        }
        total_bits += program_bits;
        token_count += costs.tokens;
        ratio_sum += program_bits / costs.tokens.max(1) as f64;
    }

    let total_count: u64 = groups.values().map(|(_, c)| *c).sum();
    let mut per_parent: Vec<ParentRow> = groups
        .into_iter()
        .map(|(parent, (bits, count))| ParentRow {
            parent,
            bits,
            // A zero-cost corpus still reports a partition, by counts.
            share_pct: if total_bits != 0.0 {
                bits / total_bits * 100.0
            } else {
                count as f64 / total_count.max(1) as f64 * 100.0
            },
            count,
        })
        .collect();
    per_parent.sort_by(|a, b| {
        b.share_pct
            .partial_cmp(&a.share_pct)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.parent.cmp(&b.parent))
    });

    Ok(EvalReport {
        variant: model.variant().id(),
        program_count: trees.len(),
        token_count,
        total_bits,
        bits_per_token: total_bits / token_count.max(1) as f64,
        mean_program_bits_per_token: ratio_sum / trees.len() as f64,
        token_bits,
        tree_bits,
        per_parent,
    })
}

/// Production costs grouped by (annotated) parent kind, sorted by share.
pub fn breakdown_by_parent(model: &Model, trees: &[Tree]) -> Result<Vec<ParentRow>> {
    Ok(eval_corpus(model, trees)?.per_parent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{AnnotatedKind, NodeKind};
    use crate::minilang::parse;
    use crate::model::SmoothingConfig;
    use crate::train::{train_lbl_tree, TrainConfig};

    fn corpus() -> Vec<Tree> {
        [
            "fn f() { int a = 0; a = a + 1; return a; }",
            "fn g(int x) { if (x < 2) { return x; } return 0; }",
            "fn h() { for (int i = 0; i < 4; ++i) { int y = i; } }",
        ]
        .iter()
        .map(|s| parse(s).unwrap())
        .collect()
    }

    fn model() -> Model {
        let trees = corpus();
        let cfg = TrainConfig {
            variant: Variant::Ltt0,
            dim: 8,
            epochs: 4,
            patience: 0,
            ..TrainConfig::default()
        };
        Model::Ltt(train_lbl_tree(&trees, &trees, None, &cfg).unwrap())
    }

    #[test]
    fn certain_model_costs_zero_bits() {
        // A single program whose every support is singleton, with pi = 1:
        // probability 1 everywhere.
        let tree = parse("fn f() { return 0; }").unwrap();
        let cfg = TrainConfig {
            variant: Variant::Ltt0,
            dim: 4,
            epochs: 1,
            patience: 0,
            ..TrainConfig::default()
        };
        let mut m = train_lbl_tree(
            std::slice::from_ref(&tree),
            std::slice::from_ref(&tree),
            None,
            &cfg,
        )
        .unwrap();
        m.smoothing = SmoothingConfig { pi: 1.0, alpha: 0.2 };
        let report = eval_corpus(&Model::Ltt(m), std::slice::from_ref(&tree)).unwrap();
        assert!(report.total_bits.abs() < 1e-9);
        assert!(report.bits_per_token.abs() < 1e-9);
    }

    #[test]
    fn arithmetic_of_bits_per_token() {
        // Two productions of probability 0.5 each over 4 tokens:
        // total = -2 bits, per token = -0.5.
        let bits = 2.0f64.powi(-1).log2() * 2.0;
        assert!((bits - -2.0).abs() < 1e-12);
        assert!((bits / 4.0 - -0.5).abs() < 1e-12);
    }

    #[test]
    fn totals_decompose() {
        let report = eval_corpus(&model(), &corpus()).unwrap();
        assert!((report.token_bits + report.tree_bits - report.total_bits).abs() < 1e-9);
        let sum: f64 = report.per_parent.iter().map(|r| r.bits).sum();
        assert!((sum - report.total_bits).abs() < 1e-9);
        let share: f64 = report.per_parent.iter().map(|r| r.share_pct).sum();
        assert!((share - 100.0).abs() < 0.1);
    }

    #[test]
    fn matches_single_pass_scorer() {
        // Independent single-pass oracle: sum smoothed log probabilities
        // straight off the production records.
        let m = model();
        let trees = corpus();
        let report = eval_corpus(&m, &trees).unwrap();
        let Model::Ltt(ltt) = &m else { unreachable!() };
        let mut oracle = 0.0;
        for tree in &trees {
            for rec in extract_records(tree, false).unwrap() {
                oracle += ltt.smoothed_log_prob(&rec, None).unwrap() / LN_2;
            }
        }
        assert!((report.total_bits - oracle).abs() < 1e-9);
    }

    #[test]
    fn unknown_token_is_an_eval_error() {
        let m = model();
        let alien = parse("fn zzz_unknown() { return 12345; }").unwrap();
        let err = eval_corpus(&m, std::slice::from_ref(&alien)).unwrap_err();
        match err {
            Error::Eval(msg) => assert!(msg.contains("zzz_unknown") || msg.contains("12345")),
            other => panic!("expected eval error, got {other:?}"),
        }
    }

    #[test]
    fn single_kind_breakdown_is_total() {
        use crate::ast::{AstNode, Child, Token, TokenKind};
        let leaf = AstNode::new(
            NodeKind::Literal,
            vec![Child::Token(Token::new("0", TokenKind::IntLiteral))],
        );
        let tree = Tree::new(leaf);
        let cfg = TrainConfig {
            variant: Variant::Ltt0,
            dim: 4,
            epochs: 1,
            patience: 0,
            ..TrainConfig::default()
        };
        let m = train_lbl_tree(
            std::slice::from_ref(&tree),
            std::slice::from_ref(&tree),
            None,
            &cfg,
        )
        .unwrap();
        let report = eval_corpus(&Model::Ltt(m), std::slice::from_ref(&tree)).unwrap();
        assert_eq!(report.per_parent.len(), 1);
        assert_eq!(report.per_parent[0].parent, AnnotatedKind::plain(NodeKind::Literal).to_string());
        assert!((report.per_parent[0].share_pct - 100.0).abs() < 1e-9);
    }

    #[test]
    fn scope_split_shares_match_reaggregation() {
        let trees = corpus();
        let cfg = TrainConfig {
            variant: Variant::LttHiSeqScope,
            dim: 8,
            epochs: 3,
            patience: 0,
            ..TrainConfig::default()
        };
        let m = train_lbl_tree(&trees, &trees, None, &cfg).unwrap();
        let model = Model::Ltt(m);
        let report = eval_corpus(&model, &trees).unwrap();
        // Re-aggregate from raw per-production logs.
        let Model::Ltt(ltt) = &model else { unreachable!() };
        let mut local = 0.0;
        let mut global = 0.0;
        for tree in &trees {
            for rec in extract_records(tree, true).unwrap() {
                if rec.parent.kind == NodeKind::IdentifierName {
                    let bits = ltt.smoothed_log_prob(&rec, None).unwrap() / LN_2;
                    match rec.parent.tag {
                        Some(crate::ast::ScopeTag::Local) => local += bits,
                        _ => global += bits,
                    }
                }
            }
        }
        for row in &report.per_parent {
            if row.parent.contains("IdentifierName") && row.parent.contains("local") {
                assert!((row.bits - local).abs() < 1e-9);
            }
            if row.parent.contains("IdentifierName") && row.parent.contains("global") {
                assert!((row.bits - global).abs() < 1e-9);
            }
        }
    }
}
