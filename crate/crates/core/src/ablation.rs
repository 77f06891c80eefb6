//! Registry of the full method and its six ablations.
//!
//! Each variant fixes which prompt families the two training terms range
//! over and how the joint table is factorized at inference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::joint::{ConditionalNormalization, Factorization};
use crate::prompt::PromptKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AblationKind {
    /// Autoregressive: rationales first, then category given rationales.
    Ecor,
    /// Rationale term only.
    Ab1,
    /// Category-only prompts, rationales never trained.
    Ab2,
    /// Conditional prompts only, scored as one flat softmax.
    Ab3,
    /// Conditional with the causal clause reversed.
    Ab4,
    /// Rationales and categories treated as independent classes.
    Ab5,
    /// Category first, then rationales given category.
    Ab6,
}

impl AblationKind {
    pub const ALL: [AblationKind; 7] = [
        AblationKind::Ecor,
        AblationKind::Ab1,
        AblationKind::Ab2,
        AblationKind::Ab3,
        AblationKind::Ab4,
        AblationKind::Ab5,
        AblationKind::Ab6,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationKind::Ecor => "ECOR",
            AblationKind::Ab1 => "AB1",
            AblationKind::Ab2 => "AB2",
            AblationKind::Ab3 => "AB3",
            AblationKind::Ab4 => "AB4",
            AblationKind::Ab5 => "AB5",
            AblationKind::Ab6 => "AB6",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AblationKind::Ecor => "P(R|I) then P(c|R,I)",
            AblationKind::Ab1 => "rationale term only",
            AblationKind::Ab2 => "category prompts only",
            AblationKind::Ab3 => "conditional term only, flat softmax",
            AblationKind::Ab4 => "rationale because category",
            AblationKind::Ab5 => "independent rationales and categories",
            AblationKind::Ab6 => "P(c|I) then P(R|c,I)",
        }
    }

    /// Prompt families of the two training terms; `None` drops a term.
    pub fn training_terms(self) -> [Option<PromptKind>; 2] {
        use PromptKind::*;
        match self {
            AblationKind::Ecor => [Some(Rationale), Some(CategoryGivenRationale)],
            AblationKind::Ab1 => [Some(Rationale), None],
            AblationKind::Ab2 => [None, Some(CategoryOnly)],
            AblationKind::Ab3 => [None, Some(CategoryGivenRationale)],
            AblationKind::Ab4 => [Some(Rationale), Some(RationaleBecauseCategory)],
            AblationKind::Ab5 => [Some(Rationale), Some(CategoryOnly)],
            AblationKind::Ab6 => [Some(CategoryOnly), Some(RationaleGivenCategory)],
        }
    }

    pub fn factorization(self, normalization: ConditionalNormalization) -> Factorization {
        match self {
            AblationKind::Ecor | AblationKind::Ab1 => Factorization::Autoregressive {
                conditional: PromptKind::CategoryGivenRationale,
                normalization,
            },
            AblationKind::Ab4 => Factorization::Autoregressive {
                conditional: PromptKind::RationaleBecauseCategory,
                normalization,
            },
            AblationKind::Ab3 => Factorization::Flat,
            AblationKind::Ab2 | AblationKind::Ab5 => Factorization::Independent,
            AblationKind::Ab6 => Factorization::Inverse,
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for k in AblationKind::ALL {
            assert_eq!(k.label().parse::<AblationKind>().unwrap(), k);
            assert_eq!(k.label().to_lowercase().parse::<AblationKind>().unwrap(), k);
        }
        assert!("AB7".parse::<AblationKind>().is_err());
    }

    #[test]
    fn every_variant_trains_something() {
        for k in AblationKind::ALL {
            assert!(k.training_terms().iter().any(Option::is_some), "{k}");
        }
    }

    #[test]
    fn category_only_variant_never_sees_rationale_prompts() {
        let terms = AblationKind::Ab2.training_terms();
        assert!(terms
            .iter()
            .flatten()
            .all(|k| *k == PromptKind::CategoryOnly));
    }
}
