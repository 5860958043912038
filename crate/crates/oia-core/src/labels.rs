//! Action and explanation label vocabularies.
//!
//! Actions are 4 binary flags (a scene may demand several at once, e.g. stop
//! AND turn left). Explanations are 21 binary flags giving object-grounded
//! reasons for the actions. Both orders are fixed; every mask string, logit
//! vector, and metric column in the project uses them.

use crate::error::{OiaError, Result};

pub const NUM_ACTIONS: usize = 4;
pub const NUM_EXPLANATIONS: usize = 21;

/// Long action names, index order F, S, L, R.
pub const ACTION_NAMES: [&str; NUM_ACTIONS] = [
    "move forward",
    "stop/slow down",
    "turn/change left",
    "turn/change right",
];

/// One-letter action column headers.
pub const ACTION_SHORT: [&str; NUM_ACTIONS] = ["F", "S", "L", "R"];

/// Explanation category names. Indices 0-2 justify moving forward, 3-8
/// justify stopping, 9-11 block a left turn, 12-14 enable one, 15-17 block a
/// right turn, 18-20 enable one.
pub const EXPLANATION_NAMES: [&str; NUM_EXPLANATIONS] = [
    "traffic light is green",
    "follow traffic",
    "road is clear",
    "traffic light",
    "traffic sign",
    "obstacle: car",
    "obstacle: person",
    "obstacle: rider",
    "obstacle: others",
    "no lane on the left",
    "obstacles on the left lane",
    "solid line on the left",
    "on the left-turn lane",
    "traffic light allows left",
    "front car turning left",
    "no lane on the right",
    "obstacles on the right lane",
    "solid line on the right",
    "on the right-turn lane",
    "traffic light allows right",
    "front car turning right",
];

fn parse_mask<const W: usize>(s: &str) -> Result<[bool; W]> {
    let bytes = s.as_bytes();
    if bytes.len() != W {
        return Err(OiaError::Invalid(format!(
            "label mask must be {W} characters, got {} in {s:?}",
            bytes.len()
        )));
    }
    let mut out = [false; W];
    for (i, &c) in bytes.iter().enumerate() {
        out[i] = match c {
            b'0' => false,
            b'1' => true,
            other => {
                return Err(OiaError::Invalid(format!(
                    "label mask may contain only '0'/'1', found {:?} at position {i}",
                    other as char
                )))
            }
        };
    }
    Ok(out)
}

fn format_mask(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Multi-hot action label in F, S, L, R order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionLabel(pub [bool; NUM_ACTIONS]);

impl ActionLabel {
    pub fn from_mask(s: &str) -> Result<Self> {
        Ok(ActionLabel(parse_mask::<NUM_ACTIONS>(s)?))
    }

    pub fn mask(&self) -> String {
        format_mask(&self.0)
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i]
    }

    /// Loss targets, 0.0 or 1.0 per flag.
    pub fn targets(&self) -> [f64; NUM_ACTIONS] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }
}

/// Multi-hot explanation label in the fixed 21-category order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExplanationLabel(pub [bool; NUM_EXPLANATIONS]);

impl ExplanationLabel {
    pub fn from_mask(s: &str) -> Result<Self> {
        Ok(ExplanationLabel(parse_mask::<NUM_EXPLANATIONS>(s)?))
    }

    pub fn mask(&self) -> String {
        format_mask(&self.0)
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn targets(&self) -> [f64; NUM_EXPLANATIONS] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}
