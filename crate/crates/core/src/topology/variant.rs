//! Named topologies and the five incremental changes that turn FCRN15 into
//! EffCRN23.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::padding::PadMode;
use crate::error::{Error, Result};
use crate::recurrent::RecurrentSpec;

/// Non-redundant bins of a 512-point DFT.
pub const SPECTRUM_BINS: usize = 257;

/// Input size used with in-network padding.
pub const IN_NETWORK_INPUT: usize = 260;

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.2;

/// One topology modification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Change {
    /// Five EDBlocks instead of three.
    Depth,
    /// Pad odd sizes to even inside the network instead of padding the input.
    Padding,
    /// `(F, N) = (27, 4)`.
    Filters,
    /// Drop the second CLSTM.
    RemoveClstm,
    /// Append a dense GRU to the bottleneck.
    Gru,
}

impl Change {
    pub const ALL: [Change; 5] = [
        Change::Depth,
        Change::Padding,
        Change::Filters,
        Change::RemoveClstm,
        Change::Gru,
    ];

    pub fn letter(self) -> char {
        match self {
            Change::Depth => 'D',
            Change::Padding => 'P',
            Change::Filters => 'F',
            Change::RemoveClstm => 'C',
            Change::Gru => 'G',
        }
    }

    /// `⊖` for removals, `⊕` otherwise.
    pub fn symbol(self) -> char {
        if self == Change::RemoveClstm {
            '⊖'
        } else {
            '⊕'
        }
    }

    fn ascii_sign(self) -> char {
        if self == Change::RemoveClstm {
            '-'
        } else {
            '+'
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|ch| ch.letter() == c.to_ascii_uppercase())
    }
}

pub type ChangeSet = BTreeSet<Change>;

/// The change sets that have a published reference configuration.
pub fn supported_change_sets() -> Vec<ChangeSet> {
    use Change::*;
    [
        &[][..],
        &[RemoveClstm],
        &[RemoveClstm, Gru],
        &[Depth],
        &[Depth, Padding],
        &[Filters],
        &[Filters, Depth, Padding],
        &Change::ALL,
    ]
    .iter()
    .map(|s| s.iter().copied().collect())
    .collect()
}

/// Order of change letters in a variant name.
fn name_order(changes: &ChangeSet) -> Vec<Change> {
    use Change::*;
    let order = if changes.contains(&Filters) {
        [Filters, Depth, Padding, RemoveClstm, Gru]
    } else {
        [RemoveClstm, Gru, Depth, Padding, Filters]
    };
    order.into_iter().filter(|c| changes.contains(c)).collect()
}

/// A named topology.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// FCRN15 with a set of changes applied. The full set is EffCRN23.
    Fcrn15(ChangeSet),
    EffCrn23Lite,
}

impl Variant {
    pub fn fcrn15() -> Self {
        Variant::Fcrn15(ChangeSet::new())
    }

    pub fn effcrn23() -> Self {
        Variant::Fcrn15(Change::ALL.into_iter().collect())
    }

    /// The rows of the published complexity tables, in table order.
    pub fn published() -> Vec<Variant> {
        let mut v = vec![
            Variant::fcrn15(),
            Variant::effcrn23(),
            Variant::EffCrn23Lite,
        ];
        v.extend(
            supported_change_sets()
                .into_iter()
                .filter(|s| !s.is_empty() && s.len() < Change::ALL.len())
                .map(Variant::Fcrn15),
        );
        v
    }

    /// Name in ASCII notation, e.g. `FCRN15-C+G`.
    pub fn ascii_name(&self) -> String {
        match self {
            Variant::Fcrn15(s) if s.len() == Change::ALL.len() => "EffCRN23".into(),
            Variant::Fcrn15(s) => {
                let mut name = String::from("FCRN15");
                for c in name_order(s) {
                    name.push(c.ascii_sign());
                    name.push(c.letter());
                }
                name
            }
            Variant::EffCrn23Lite => "EffCRN23lite".into(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Fcrn15(s) if !s.is_empty() && s.len() < Change::ALL.len() => {
                f.write_str("FCRN15")?;
                for c in name_order(s) {
                    write!(f, "{}{}", c.symbol(), c.letter())?;
                }
                Ok(())
            }
            _ => f.write_str(&self.ascii_name()),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `FCRN15`, `EffCRN23`, `EffCRN23lite` (any case), and FCRN15
    /// followed by changes written with `⊕`/`⊖` or `+`/`-`.
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim();
        let lower = trimmed.to_ascii_lowercase();
        match lower.as_str() {
            "effcrn23" => return Ok(Variant::effcrn23()),
            "effcrn23lite" | "effcrn23-lite" => return Ok(Variant::EffCrn23Lite),
            _ => {}
        }
        let rest = lower
            .strip_prefix("fcrn15")
            .map(|_| &trimmed["fcrn15".len()..])
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?}")))?;

        let mut changes = ChangeSet::new();
        let mut chars = rest.chars();
        while let Some(sign) = chars.next() {
            let add = match sign {
                '⊕' | '+' => true,
                '⊖' | '-' => false,
                _ => {
                    return Err(Error::Usage(format!(
                        "unexpected {sign:?} in variant {s:?}"
                    )))
                }
            };
            let change = chars.next().and_then(Change::from_letter).ok_or_else(|| {
                Error::Usage(format!("missing change letter after {sign:?} in {s:?}"))
            })?;
            if add != (change != Change::RemoveClstm) {
                return Err(Error::Usage(format!(
                    "change {} cannot be written with {sign:?}",
                    change.letter()
                )));
            }
            if !changes.insert(change) {
                return Err(Error::Usage(format!(
                    "change {} given twice in {s:?}",
                    change.letter()
                )));
            }
        }
        check_supported(&changes)?;
        Ok(Variant::Fcrn15(changes))
    }
}

fn check_supported(changes: &ChangeSet) -> Result<()> {
    if supported_change_sets().contains(changes) {
        return Ok(());
    }
    let listed: Vec<String> = name_order(changes)
        .iter()
        .map(|c| format!("{}{}", c.symbol(), c.letter()))
        .collect();
    Err(Error::Config(format!(
        "unsupported change combination {{{}}}",
        listed.join(",")
    )))
}

/// Declarative description of a topology instance. Everything else (layer
/// table, parameters, FLOPs) is derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Base filter count; EDBlock `i` uses `i·F` filters.
    pub filters: usize,
    /// Kernel size along frequency.
    pub kernel: usize,
    /// Frequency size entering the first EDBlock.
    pub input_size: usize,
    /// Bins of the spectrum the model consumes and produces.
    pub spectrum_bins: usize,
    pub blocks: usize,
    pub pad_mode: PadMode,
    pub bottleneck: Vec<RecurrentSpec>,
    pub leaky_slope: f32,
    pub out_channels: usize,
}

impl ModelSpec {
    pub fn fcrn15() -> Self {
        Self {
            name: "FCRN15".into(),
            filters: 32,
            kernel: 12,
            input_size: 264,
            spectrum_bins: SPECTRUM_BINS,
            blocks: 3,
            pad_mode: PadMode::External,
            bottleneck: vec![
                RecurrentSpec::ConvLstm { hidden: 32 },
                RecurrentSpec::ConvLstm { hidden: 32 },
            ],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            out_channels: 2,
        }
    }

    /// Zero bins appended to the spectrum before the first EDBlock.
    pub fn external_pad(&self) -> usize {
        self.input_size - self.spectrum_bins
    }

    pub fn for_variant(variant: &Variant) -> Result<Self> {
        match variant {
            Variant::Fcrn15(changes) => apply_variant(&Self::fcrn15(), changes),
            Variant::EffCrn23Lite => {
                let mut spec = apply_variant(&Self::fcrn15(), &Change::ALL.into_iter().collect())?;
                spec.set_filters(17);
                spec.name = variant.ascii_name();
                Ok(spec)
            }
        }
    }

    /// Changes `F`; CLSTMs that tracked the old `F` follow it.
    fn set_filters(&mut self, filters: usize) {
        let old = self.filters;
        for cell in &mut self.bottleneck {
            if let RecurrentSpec::ConvLstm { hidden } = cell {
                if *hidden == old {
                    *hidden = filters;
                }
            }
        }
        self.filters = filters;
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(w) = o.clstm_width {
            if w == 0 {
                return Err(Error::Config("CLSTM width must be positive".into()));
            }
            for cell in &mut self.bottleneck {
                if let RecurrentSpec::ConvLstm { hidden } = cell {
                    *hidden = w;
                }
            }
        }
        if let Some(w) = o.gru_width {
            let mut found = false;
            for cell in &mut self.bottleneck {
                if let RecurrentSpec::Gru { hidden } = cell {
                    *hidden = Some(w);
                    found = true;
                }
            }
            if !found {
                return Err(Error::Config(format!("{} has no GRU to resize", self.name)));
            }
        }
        if let Some(slope) = o.leaky_slope {
            if !slope.is_finite() || slope < 0.0 {
                return Err(Error::Config(format!("invalid LeakyReLU slope {slope}")));
            }
            self.leaky_slope = slope;
        }
        Ok(())
    }

    /// Canonical JSON encoding.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// Hex SHA-256 of the canonical encoding; identifies the architecture.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The free hyperparameters a caller may change on a named variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub clstm_width: Option<usize>,
    pub gru_width: Option<usize>,
    pub leaky_slope: Option<f32>,
}

/// Applies a supported change set to a spec.
pub fn apply_variant(base: &ModelSpec, changes: &ChangeSet) -> Result<ModelSpec> {
    check_supported(changes)?;
    let mut spec = base.clone();
    if changes.contains(&Change::RemoveClstm) {
        let clstms: Vec<usize> = spec
            .bottleneck
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c, RecurrentSpec::ConvLstm { .. }))
            .map(|(i, _)| i)
            .collect();
        match clstms[..] {
            [_, second, ..] => {
                spec.bottleneck.remove(second);
            }
            _ => return Err(Error::Config("no second CLSTM to remove".into())),
        }
    }
    if changes.contains(&Change::Gru) {
        spec.bottleneck.push(RecurrentSpec::Gru { hidden: None });
    }
    if changes.contains(&Change::Filters) {
        spec.set_filters(27);
        spec.kernel = 4;
    }
    if changes.contains(&Change::Depth) {
        spec.blocks = 5;
    }
    if changes.contains(&Change::Padding) {
        spec.pad_mode = PadMode::InNetwork;
        spec.input_size = IN_NETWORK_INPUT;
    } else {
        let step = 1usize << spec.blocks;
        spec.input_size = spec.spectrum_bins.div_ceil(step) * step;
    }
    spec.name = match Variant::from_str(&spec.name) {
        Ok(Variant::Fcrn15(prev)) => {
            Variant::Fcrn15(prev.union(changes).copied().collect()).ascii_name()
        }
        _ => Variant::Fcrn15(changes.clone()).ascii_name(),
    };
    Ok(spec)
}
