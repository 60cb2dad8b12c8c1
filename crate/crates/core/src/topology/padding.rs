//! Frequency sizes through the encoder, and where odd sizes get padded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// The input is zero-padded once so that every stage halves exactly.
    External,
    /// A single zero bin is appended before any EDBlock whose input is odd
    /// and removed again after the matching decoder stage.
    InNetwork,
}

/// Per-stage pad bits and the matching decoder crops.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadPlan {
    /// Bins appended before encoder stage `i` (0 or 1).
    pub pads: Vec<usize>,
    /// Frequency size entering stage `i`, before its pad.
    pub inputs: Vec<usize>,
    pub bottleneck: usize,
}

impl PadPlan {
    pub fn stages(&self) -> usize {
        self.pads.len()
    }

    /// Size stage `i` actually operates on.
    pub fn padded(&self, stage: usize) -> usize {
        self.inputs[stage] + self.pads[stage]
    }

    /// Bins removed after decoder stage `i`, listed in decoder order
    /// (deepest stage first).
    pub fn crops(&self) -> Vec<usize> {
        self.pads.iter().rev().copied().collect()
    }

    /// Sizes from the input down to the bottleneck.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = self.inputs.clone();
        s.push(self.bottleneck);
        s
    }
}

/// Plans `stages` halvings of an `input`-bin spectrum.
pub fn plan_padding(input: usize, stages: usize, mode: PadMode) -> Result<PadPlan> {
    let mut size = input;
    let mut pads = Vec::with_capacity(stages);
    let mut inputs = Vec::with_capacity(stages);
    for stage in 0..stages {
        if size < 2 {
            return Err(Error::Config(format!(
                "{input} bins cannot be halved {stages} times"
            )));
        }
        let pad = size % 2;
        if pad == 1 && mode == PadMode::External {
            return Err(Error::Config(format!(
                "{input} bins reach odd size {size} before stage {} without in-network padding",
                stage + 1
            )));
        }
        inputs.push(size);
        pads.push(pad);
        size = (size + pad) / 2;
    }
    Ok(PadPlan {
        pads,
        inputs,
        bottleneck: size,
    })
}
