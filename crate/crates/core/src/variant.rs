//! Named experiment presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noising::{CompanionMode, NoisingPolicy};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "full-finetune")]
    FullFinetune,
    #[serde(rename = "iti")]
    Iti,
    #[serde(rename = "iti+si")]
    ItiSi,
    #[serde(rename = "iti+sf")]
    ItiSf,
    #[serde(rename = "iti+sf+copy")]
    ItiSfCopy,
    #[serde(rename = "iti+sf+si")]
    ItiSfSi,
}

impl Variant {
    /// Row order of the comparison tables.
    pub const ALL: [Variant; 7] = [
        Variant::Base,
        Variant::FullFinetune,
        Variant::Iti,
        Variant::ItiSi,
        Variant::ItiSf,
        Variant::ItiSfCopy,
        Variant::ItiSfSi,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::FullFinetune => "full-finetune",
            Variant::Iti => "iti",
            Variant::ItiSi => "iti+si",
            Variant::ItiSf => "iti+sf",
            Variant::ItiSfCopy => "iti+sf+copy",
            Variant::ItiSfSi => "iti+sf+si",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::FullFinetune => "Full-FT",
            Variant::Iti => "ITI",
            Variant::ItiSi => "ITI+SI",
            Variant::ItiSf => "ITI+SF",
            Variant::ItiSfCopy => "ITI+SF+Copy",
            Variant::ItiSfSi => "ITI+SF+SI",
        }
    }

    pub fn rank(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).unwrap()
    }

    fn preset(self) -> Preset {
        let (p_iti, companion, w_sf, sf_on_iti, freeze, epochs) = match self {
            Variant::Base => (0.5, CompanionMode::SpanInfilling, 0.0, false, true, Some(0)),
            Variant::FullFinetune => (0.5, CompanionMode::SpanInfilling, 0.0, false, false, None),
            Variant::Iti => (1.0, CompanionMode::SpanInfilling, 0.0, false, true, None),
            Variant::ItiSi => (0.5, CompanionMode::SpanInfilling, 0.0, false, true, None),
            Variant::ItiSf => (1.0, CompanionMode::SpanInfilling, 1.0, true, true, None),
            Variant::ItiSfCopy => (0.5, CompanionMode::Copy, 1.0, false, true, None),
            Variant::ItiSfSi => (0.5, CompanionMode::SpanInfilling, 1.0, false, true, None),
        };
        Preset { p_iti, companion, w_sf, sf_on_iti, freeze, epochs }
    }

    /// Overwrites the fields this variant determines.
    pub fn apply(self, policy: &mut NoisingPolicy, train: &mut TrainConfig) {
        let p = self.preset();
        policy.p_iti = p.p_iti;
        policy.companion_mode = p.companion;
        train.sf_on_iti = p.sf_on_iti;
        train.freeze_backbone = p.freeze;
        if p.w_sf == 0.0 {
            train.w_sf = 0.0;
        } else if train.w_sf == 0.0 {
            train.w_sf = p.w_sf;
        }
        if let Some(e) = p.epochs {
            train.epochs = e;
        }
    }

    /// Rejects settings that contradict the variant.
    pub fn check(self, policy: &NoisingPolicy, train: &TrainConfig) -> Result<()> {
        let p = self.preset();
        let tag = self.tag();
        let mut problems = Vec::new();
        if policy.p_iti != p.p_iti {
            problems.push(format!("noising.p_iti = {} (expected {})", policy.p_iti, p.p_iti));
        }
        if p.p_iti < 1.0 && policy.companion_mode != p.companion {
            problems.push(format!("noising.companion_mode = {:?} (expected {:?})", policy.companion_mode, p.companion));
        }
        if p.w_sf == 0.0 && train.w_sf != 0.0 {
            problems.push(format!("train.w_sf = {} (expected 0)", train.w_sf));
        }
        if p.w_sf > 0.0 && train.w_sf == 0.0 {
            problems.push("train.w_sf = 0 (expected > 0)".to_string());
        }
        if train.sf_on_iti != p.sf_on_iti {
            problems.push(format!("train.sf_on_iti = {} (expected {})", train.sf_on_iti, p.sf_on_iti));
        }
        if train.freeze_backbone != p.freeze {
            problems.push(format!("train.freeze_backbone = {} (expected {})", train.freeze_backbone, p.freeze));
        }
        if let Some(e) = p.epochs {
            if train.epochs != e {
                problems.push(format!("train.epochs = {} (expected {e})", train.epochs));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("variant {tag} conflicts with {}", problems.join(", "))))
        }
    }
}

struct Preset {
    p_iti: f64,
    companion: CompanionMode,
    w_sf: f64,
    sf_on_iti: bool,
    freeze: bool,
    epochs: Option<usize>,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == norm)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|v| v.tag()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", known.join(", ")))
            })
    }
}
