//! The model variants exposed by the toolkit and their context feature
//! layouts.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ANCESTOR_WINDOW, TOKEN_WINDOW};

/// Every trainable model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Additively smoothed token n-gram of the given order (2..=5).
    Ngram(usize),
    /// Log-bilinear 10-gram over tokens.
    LblNgram10,
    /// Tabular PCFG over children tuples.
    Pcfg,
    /// Log-bilinear children model conditioned on the parent only.
    Ltt0,
    /// Adds depth, parent kind and ancestor history features.
    LttHi,
    /// Adds the last-tokens window.
    LttSeq,
    /// Hierarchy plus sequence features.
    LttHiSeq,
    /// LttHiSeq plus local/global identifier annotation and the scope model.
    LttHiSeqScope,
    /// Ltt0 plus one discrete latent traversal variable, trained with EM.
    LttLatent,
    /// Token-level HMM with log-bilinear emissions.
    LblHmm,
}

impl Variant {
    pub const ALL: &'static [Variant] = &[
        Variant::Ngram(2),
        Variant::Ngram(3),
        Variant::Ngram(4),
        Variant::Ngram(5),
        Variant::LblNgram10,
        Variant::Pcfg,
        Variant::Ltt0,
        Variant::LttHi,
        Variant::LttSeq,
        Variant::LttHiSeq,
        Variant::LttHiSeqScope,
        Variant::LttLatent,
        Variant::LblHmm,
    ];

    pub fn id(&self) -> String {
        match self {
            Variant::Ngram(n) => format!("ngram{n}"),
            Variant::LblNgram10 => "lbl-ngram10".to_string(),
            Variant::Pcfg => "pcfg".to_string(),
            Variant::Ltt0 => "ltt0".to_string(),
            Variant::LttHi => "ltt-hi".to_string(),
            Variant::LttSeq => "ltt-seq".to_string(),
            Variant::LttHiSeq => "ltt-hiseq".to_string(),
            Variant::LttHiSeqScope => "ltt-hiseq-scope".to_string(),
            Variant::LttLatent => "ltt-latent".to_string(),
            Variant::LblHmm => "lbl-hmm".to_string(),
        }
    }

    pub fn parse_id(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// Variants that assign probabilities to trees via children
    /// distributions (as opposed to flat token sequences).
    pub fn is_tree_model(&self) -> bool {
        !matches!(self, Variant::Ngram(_) | Variant::LblNgram10 | Variant::LblHmm)
    }

    /// Log-bilinear tree variants trained through the shared production
    /// engine.
    pub fn is_lbl_tree(&self) -> bool {
        matches!(
            self,
            Variant::Ltt0
                | Variant::LttHi
                | Variant::LttSeq
                | Variant::LttHiSeq
                | Variant::LttHiSeqScope
                | Variant::LttLatent
        )
    }

    pub fn uses_scope(&self) -> bool {
        matches!(self, Variant::LttHiSeqScope)
    }

    pub fn has_latent(&self) -> bool {
        matches!(self, Variant::LttLatent | Variant::LblHmm)
    }

    /// Context slot layout for log-bilinear variants; slot 0 modulates the
    /// parent (or, for token models, is the first context position).
    pub fn context_slots(&self) -> Vec<SlotKind> {
        let hi = |slots: &mut Vec<SlotKind>| {
            slots.push(SlotKind::Depth);
            slots.push(SlotKind::ParentKind);
            for j in 0..ANCESTOR_WINDOW {
                slots.push(SlotKind::Ancestor(j));
            }
        };
        let seq = |slots: &mut Vec<SlotKind>| {
            for j in 0..TOKEN_WINDOW {
                slots.push(SlotKind::LastToken(j));
            }
        };
        match self {
            Variant::Ltt0 | Variant::Pcfg => vec![SlotKind::Parent],
            Variant::LttHi => {
                let mut s = vec![SlotKind::Parent];
                hi(&mut s);
                s
            }
            Variant::LttSeq => {
                let mut s = vec![SlotKind::Parent];
                seq(&mut s);
                s
            }
            Variant::LttHiSeq | Variant::LttHiSeqScope => {
                let mut s = vec![SlotKind::Parent];
                hi(&mut s);
                seq(&mut s);
                s
            }
            Variant::LttLatent => vec![SlotKind::Parent, SlotKind::Latent],
            Variant::LblHmm => vec![SlotKind::Latent],
            Variant::LblNgram10 => (1..=9).map(SlotKind::PrevToken).collect(),
            Variant::Ngram(_) => Vec::new(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// A position in the context representation; each slot owns one diagonal
/// modulation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    /// The expanding node's own (annotated) kind.
    Parent,
    /// Capped depth bucket.
    Depth,
    /// Kind of the node's parent.
    ParentKind,
    /// j-th nearest ancestor pair (kind, child index); j = 0 is the parent.
    Ancestor(usize),
    /// j tokens back in the emitted stream; j = 0 is the most recent.
    LastToken(usize),
    /// The discrete latent traversal state.
    Latent,
    /// Token j positions back, for token-sequence models (j >= 1).
    PrevToken(usize),
}

impl SlotKind {
    pub fn name(&self) -> String {
        match self {
            SlotKind::Parent => "parent".to_string(),
            SlotKind::Depth => "depth".to_string(),
            SlotKind::ParentKind => "parent-kind".to_string(),
            SlotKind::Ancestor(j) => format!("ancestor{j}"),
            SlotKind::LastToken(j) => format!("last-token{j}"),
            SlotKind::Latent => "latent".to_string(),
            SlotKind::PrevToken(j) => format!("prev-token{j}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse_id(&v.id()).unwrap(), *v);
        }
        assert!(Variant::parse_id("ngram6").is_err());
    }

    #[test]
    fn hiseq_slot_count() {
        // parent + depth + parent-kind + 10 ancestors + 10 tokens
        assert_eq!(Variant::LttHiSeq.context_slots().len(), 23);
        assert_eq!(Variant::Ltt0.context_slots().len(), 1);
        assert_eq!(Variant::LblNgram10.context_slots().len(), 9);
    }
}
