//! Parameter and FLOP totals, and their comparison with the published
//! complexity figures.

use serde::Serialize;

use super::graph::LayerGraph;
use super::variant::{ModelSpec, Overrides, Variant};
use crate::error::Result;

pub const PARAM_TOLERANCE: f64 = 0.10;
pub const FLOP_TOLERANCE: f64 = 0.20;

pub fn count_params(graph: &LayerGraph) -> usize {
    graph.num_params()
}

pub fn count_flops_per_frame(graph: &LayerGraph) -> usize {
    graph.flops_per_frame()
}

/// Published `(variant, #params, #FLOPs/frame)`.
pub const PUBLISHED: [(&str, usize, usize); 9] = [
    ("FCRN15", 875_000, 123_000_000),
    ("EffCRN23", 997_000, 41_000_000),
    ("EffCRN23lite", 396_000, 16_000_000),
    ("FCRN15-C", 777_000, 112_000_000),
    ("FCRN15-C+G", 7_400_000, 125_000_000),
    ("FCRN15+D", 2_800_000, 183_000_000),
    ("FCRN15+D+P", 2_800_000, 172_000_000),
    ("FCRN15+F", 209_000, 29_000_000),
    ("FCRN15+F+D+P", 665_000, 41_000_000),
];

/// Published `(params, flops)` for a variant, if any.
pub fn published(variant: &Variant) -> Option<(usize, usize)> {
    let name = variant.ascii_name();
    PUBLISHED
        .iter()
        .find(|(n, ..)| *n == name)
        .map(|&(_, p, f)| (p, f))
}

#[derive(Clone, Debug, Serialize)]
pub struct AccountingRow {
    pub variant: String,
    pub depth: usize,
    pub params: usize,
    pub flops: usize,
    pub published_params: Option<usize>,
    pub published_flops: Option<usize>,
}

fn deviation(ours: usize, theirs: Option<usize>) -> Option<f64> {
    theirs.map(|t| (ours as f64 - t as f64) / t as f64)
}

impl AccountingRow {
    pub fn for_variant(variant: &Variant) -> Result<Self> {
        let graph = LayerGraph::from_spec(&ModelSpec::for_variant(variant)?)?;
        let reference = published(variant);
        Ok(Self {
            variant: variant.to_string(),
            depth: graph.depth(),
            params: count_params(&graph),
            flops: count_flops_per_frame(&graph),
            published_params: reference.map(|r| r.0),
            published_flops: reference.map(|r| r.1),
        })
    }

    /// Relative deviation from the published parameter count.
    pub fn params_deviation(&self) -> Option<f64> {
        deviation(self.params, self.published_params)
    }

    pub fn flops_deviation(&self) -> Option<f64> {
        deviation(self.flops, self.published_flops)
    }

    pub fn within_tolerance(&self) -> bool {
        self.params_deviation()
            .is_none_or(|d| d.abs() <= PARAM_TOLERANCE)
            && self
                .flops_deviation()
                .is_none_or(|d| d.abs() <= FLOP_TOLERANCE)
    }
}

/// Difference between two ablation steps.
#[derive(Clone, Debug, Serialize)]
pub struct Delta {
    pub from: String,
    pub to: String,
    pub params: i64,
    pub flops: i64,
    pub published_params: Option<i64>,
    pub published_flops: Option<i64>,
}

/// Consecutive steps of the ablation path.
pub fn ablation_pairs() -> Vec<(Variant, Variant)> {
    let v = |s: &str| s.parse::<Variant>().expect("known variant");
    [
        ("FCRN15", "FCRN15-C"),
        ("FCRN15-C", "FCRN15-C+G"),
        ("FCRN15", "FCRN15+D"),
        ("FCRN15+D", "FCRN15+D+P"),
        ("FCRN15", "FCRN15+F"),
        ("FCRN15+F", "FCRN15+F+D+P"),
        ("FCRN15+F+D+P", "EffCRN23"),
        ("EffCRN23", "EffCRN23lite"),
    ]
    .iter()
    .map(|(a, b)| (v(a), v(b)))
    .collect()
}

pub fn delta(a: &AccountingRow, b: &AccountingRow) -> Delta {
    let diff = |x: Option<usize>, y: Option<usize>| Some(y? as i64 - x? as i64);
    Delta {
        from: a.variant.clone(),
        to: b.variant.clone(),
        params: b.params as i64 - a.params as i64,
        flops: b.flops as i64 - a.flops as i64,
        published_params: diff(a.published_params, b.published_params),
        published_flops: diff(a.published_flops, b.published_flops),
    }
}

/// Pairs whose published values are strictly ordered one way and whose
/// computed values are not ordered the same way. Published ties constrain
/// nothing.
pub fn ordering_violations(rows: &[AccountingRow]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let checks = [
                (
                    "params",
                    a.params,
                    b.params,
                    a.published_params,
                    b.published_params,
                ),
                (
                    "FLOPs",
                    a.flops,
                    b.flops,
                    a.published_flops,
                    b.published_flops,
                ),
            ];
            for (what, x, y, px, py) in checks {
                let (Some(px), Some(py)) = (px, py) else {
                    continue;
                };
                if px != py && (px < py) != (x < y) {
                    out.push(format!(
                        "{what}: {} vs {} ordered differently",
                        a.variant, b.variant
                    ));
                }
            }
        }
    }
    out
}

/// CLSTM width in `1..=max_width` whose total parameter count lands closest
/// to `target`, with that count. Ties go to the narrower width.
pub fn fit_clstm_width(
    spec: &ModelSpec,
    target: usize,
    max_width: usize,
) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for width in 1..=max_width {
        let mut s = spec.clone();
        s.apply_overrides(&Overrides {
            clstm_width: Some(width),
            ..Default::default()
        })?;
        let params = count_params(&LayerGraph::from_spec(&s)?);
        if best.is_none_or(|(_, p)| params.abs_diff(target) < p.abs_diff(target)) {
            best = Some((width, params));
        }
    }
    best.ok_or_else(|| crate::error::Error::Config("no CLSTM width to fit".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_widths_ship_in_the_specs() {
        for (variant, target) in [
            (Variant::effcrn23(), 997_000),
            (Variant::EffCrn23Lite, 396_000),
        ] {
            let spec = ModelSpec::for_variant(&variant).unwrap();
            let (width, params) = fit_clstm_width(&spec, target, 64).unwrap();
            let shipped = spec.bottleneck.iter().find_map(|c| match c {
                crate::recurrent::RecurrentSpec::ConvLstm { hidden } => Some(*hidden),
                _ => None,
            });
            assert_eq!(
                Some(width),
                shipped,
                "{variant}: fitted {width} ({params} params)"
            );
        }
    }

    #[test]
    fn every_published_row_resolves() {
        for v in Variant::published() {
            assert!(published(&v).is_some(), "{v}");
        }
    }

    #[test]
    fn deviations_within_tolerance() {
        let rows: Vec<_> = Variant::published()
            .iter()
            .map(|v| AccountingRow::for_variant(v).unwrap())
            .collect();
        for r in &rows {
            assert!(r.within_tolerance(), "{r:?}");
        }
        assert!(
            ordering_violations(&rows).is_empty(),
            "{:?}",
            ordering_violations(&rows)
        );
    }
}
