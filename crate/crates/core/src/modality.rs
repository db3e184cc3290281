use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CmcError;

/// Imaging modality of a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "SAR")]
    Sar,
    #[serde(rename = "EO")]
    Eo,
    /// Building footprint mask, fed as a single 0/1 channel.
    #[serde(rename = "GT")]
    Gt,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Sar, Modality::Eo, Modality::Gt];

    pub fn channels(self) -> usize {
        match self {
            Modality::Sar | Modality::Eo => 3,
            Modality::Gt => 1,
        }
    }

    /// Short lowercase key used in parameter and container entry names.
    pub fn key(self) -> &'static str {
        match self {
            Modality::Sar => "sar",
            Modality::Eo => "eo",
            Modality::Gt => "gt",
        }
    }

    pub fn is_mask(self) -> bool {
        self == Modality::Gt
    }

    pub fn index(self) -> u64 {
        match self {
            Modality::Sar => 0,
            Modality::Eo => 1,
            Modality::Gt => 2,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Sar => "SAR",
            Modality::Eo => "EO",
            Modality::Gt => "GT",
        })
    }
}

impl FromStr for Modality {
    type Err = CmcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "SAR" => Ok(Modality::Sar),
            "EO" => Ok(Modality::Eo),
            "GT" => Ok(Modality::Gt),
            _ => Err(CmcError::Config(format!("unknown modality {s:?}"))),
        }
    }
}
