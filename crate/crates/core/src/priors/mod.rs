//! Class shape priors and where they attach to the network.

pub mod cab;
pub mod cbn;
pub mod codebook;
pub mod gce;
pub mod wallace;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conditioning;

pub use cab::{cab_modulation, CabBank, CabLayer};
pub use cbn::{mcce_params, CbnBank, CbnRow};
pub use codebook::{
    codebook_contribution, compose_cgce, compose_cgce_backward, knockout_codebook, AttentionTable,
    CodebookSet, DEFAULT_CODEBOOKS, DEFAULT_CODES,
};
pub use gce::{compose_gce, GlobalEmbeddingTable};
pub use wallace::{wallace_encode, wallace_prior, ShapeEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// No prior: the zero-shot and all-shot baselines.
    None,
    WallaceAvg,
    Gce,
    Cgce,
    McceEnc,
    McceDec,
    McceFull,
    CabEnc,
    CabDec,
    CabFull,
    /// Attention blocks in the encoder, class batch norm in the decoder.
    Hybrid,
}

/// How the class prior reaches the decoder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingFusion {
    None,
    Concat,
    Sum,
}

impl PriorKind {
    pub const ALL: [PriorKind; 11] = [
        PriorKind::None,
        PriorKind::WallaceAvg,
        PriorKind::Gce,
        PriorKind::Cgce,
        PriorKind::McceEnc,
        PriorKind::McceDec,
        PriorKind::McceFull,
        PriorKind::CabEnc,
        PriorKind::CabDec,
        PriorKind::CabFull,
        PriorKind::Hybrid,
    ];

    /// The eight encoder/decoder placements compared in the placement sweep.
    pub const PLACEMENTS: [PriorKind; 8] = [
        PriorKind::McceEnc,
        PriorKind::McceDec,
        PriorKind::McceFull,
        PriorKind::CabEnc,
        PriorKind::CabDec,
        PriorKind::CabFull,
        PriorKind::Cgce,
        PriorKind::Hybrid,
    ];

    pub fn encoder_conditioning(self) -> Conditioning {
        match self {
            PriorKind::McceEnc | PriorKind::McceFull => Conditioning::Cbn,
            PriorKind::CabEnc | PriorKind::CabFull | PriorKind::Hybrid => Conditioning::Cab,
            _ => Conditioning::None,
        }
    }

    pub fn decoder_conditioning(self) -> Conditioning {
        match self {
            PriorKind::McceDec | PriorKind::McceFull | PriorKind::Hybrid => Conditioning::Cbn,
            PriorKind::CabDec | PriorKind::CabFull => Conditioning::Cab,
            _ => Conditioning::None,
        }
    }

    pub fn fusion(self) -> EmbeddingFusion {
        match self {
            PriorKind::Gce | PriorKind::Cgce => EmbeddingFusion::Concat,
            PriorKind::WallaceAvg => EmbeddingFusion::Sum,
            _ => EmbeddingFusion::None,
        }
    }

    /// Whether the variant has per-class parameters to fit for a novel class.
    pub fn is_conditioned(self) -> bool {
        self != PriorKind::None
    }

    pub fn name(self) -> &'static str {
        match self {
            PriorKind::None => "none",
            PriorKind::WallaceAvg => "wallace_avg",
            PriorKind::Gce => "gce",
            PriorKind::Cgce => "cgce",
            PriorKind::McceEnc => "mcce_enc",
            PriorKind::McceDec => "mcce_dec",
            PriorKind::McceFull => "mcce_full",
            PriorKind::CabEnc => "cab_enc",
            PriorKind::CabDec => "cab_dec",
            PriorKind::CabFull => "cab_full",
            PriorKind::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    /// Accepts the snake-case names plus the CLI aliases `zs`, `as`,
    /// `wallace` and dashed spellings such as `mcce-dec`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "zs" | "as" => return Ok(PriorKind::None),
            "wallace" => return Ok(PriorKind::WallaceAvg),
            _ => {}
        }
        PriorKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Configuration(format!("unknown prior variant {s:?}")))
    }
}
