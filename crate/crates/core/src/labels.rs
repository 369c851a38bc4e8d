//! Sleep stage label space and the R&K-to-AASM mapping.
//!
//! Raw hypnogram tokens follow the older R&K scheme (Stage 0-4, REM,
//! movement, unscored). Stages 3 and 4 merge into N3; movement and unscored
//! epochs are discarded.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five AASM sleep stages, indexed 0..5 as (W, N1, N2, N3, REM).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AasmStage {
    #[serde(rename = "W")]
    Wake,
    N1,
    N2,
    N3,
    #[serde(rename = "REM")]
    Rem,
}

impl AasmStage {
    pub const ALL: [AasmStage; 5] = [
        AasmStage::Wake,
        AasmStage::N1,
        AasmStage::N2,
        AasmStage::N3,
        AasmStage::Rem,
    ];

    pub fn index(self) -> usize {
        match self {
            AasmStage::Wake => 0,
            AasmStage::N1 => 1,
            AasmStage::N2 => 2,
            AasmStage::N3 => 3,
            AasmStage::Rem => 4,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Input(format!("class index {i} out of range [0, 5)")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AasmStage::Wake => "W",
            AasmStage::N1 => "N1",
            AasmStage::N2 => "N2",
            AasmStage::N3 => "N3",
            AasmStage::Rem => "REM",
        }
    }
}

impl fmt::Display for AasmStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of mapping one raw hypnogram token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MappedLabel {
    Stage(AasmStage),
    /// Movement time or unscored; the epoch is dropped.
    Discard,
}

/// Map one raw R&K token: `W`/`0` -> W, `1` -> N1, `2` -> N2, `3`/`4` -> N3,
/// `R` -> REM, `M`/`?` -> discard.
pub fn map_raw_label(token: &str) -> Result<MappedLabel> {
    match token.trim() {
        "W" | "w" | "0" => Ok(MappedLabel::Stage(AasmStage::Wake)),
        "1" => Ok(MappedLabel::Stage(AasmStage::N1)),
        "2" => Ok(MappedLabel::Stage(AasmStage::N2)),
        "3" | "4" => Ok(MappedLabel::Stage(AasmStage::N3)),
        "R" | "r" => Ok(MappedLabel::Stage(AasmStage::Rem)),
        "M" | "m" | "?" => Ok(MappedLabel::Discard),
        other => Err(Error::Parse(format!("unknown label token '{other}'"))),
    }
}

/// Parse a labels file: one raw token per line. Errors name the offending
/// epoch (line) index.
pub fn parse_labels(text: &str) -> Result<Vec<MappedLabel>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mapped = map_raw_label(line)
            .map_err(|e| Error::Parse(format!("{e} at epoch {i}")))?;
        out.push(mapped);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_table() {
        assert_eq!(
            map_raw_label("4").unwrap(),
            MappedLabel::Stage(AasmStage::N3)
        );
        assert_eq!(
            map_raw_label("3").unwrap(),
            MappedLabel::Stage(AasmStage::N3)
        );
        assert_eq!(map_raw_label("M").unwrap(), MappedLabel::Discard);
        assert_eq!(map_raw_label("?").unwrap(), MappedLabel::Discard);
        assert_eq!(
            map_raw_label("R").unwrap(),
            MappedLabel::Stage(AasmStage::Rem)
        );
        assert_eq!(
            map_raw_label("W").unwrap(),
            MappedLabel::Stage(AasmStage::Wake)
        );
        assert_eq!(
            map_raw_label("0").unwrap(),
            MappedLabel::Stage(AasmStage::Wake)
        );
    }

    #[test]
    fn unknown_token_names_the_epoch() {
        let err = parse_labels("W\n2\nX\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'X'") && msg.contains("epoch 2"), "{msg}");
    }

    #[test]
    fn every_token_maps_to_exactly_one_outcome() {
        for token in ["W", "0", "1", "2", "3", "4", "R", "M", "?"] {
            map_raw_label(token).unwrap();
        }
    }
}
