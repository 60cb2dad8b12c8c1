//! FCRN15, EffCRN23 and their intermediate ablations: specs, layer tables,
//! the executable model, complexity accounting and checkpoints.

pub mod accounting;
pub mod checkpoint;
mod graph;
mod model;
mod padding;
mod variant;

pub use accounting::{count_flops_per_frame, count_params, AccountingRow};
pub use graph::{Layer, LayerGraph, LayerKind};
pub use model::Model;
pub use padding::{plan_padding, PadMode, PadPlan};
pub use variant::{
    apply_variant, supported_change_sets, Change, ChangeSet, ModelSpec, Overrides, Variant,
    DEFAULT_LEAKY_SLOPE, IN_NETWORK_INPUT, SPECTRUM_BINS,
};

/// Builds the layer table and spec of a named variant.
pub fn build_model(
    variant: &Variant,
    overrides: &Overrides,
) -> crate::Result<(LayerGraph, ModelSpec)> {
    let mut spec = ModelSpec::for_variant(variant)?;
    spec.apply_overrides(overrides)?;
    Ok((LayerGraph::from_spec(&spec)?, spec))
}
