//! Parameter-overhead tables and multi-seed block comparisons.

use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::BlockKind;
use crate::error::Result;
use crate::segnet::{NetConfig, Placement};
use crate::train::{train, EpochRecord, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct ComplexityRow {
    pub block_kind: Option<BlockKind>,
    pub placement: Placement,
    pub total: usize,
    pub block_overhead: usize,
    pub overhead_fraction: f64,
}

/// Parameter counts of every block kind at every placement, on the widths,
/// reduction and PE settings of `base`. The first row is the bare backbone.
pub fn complexity_table(base: &NetConfig) -> Result<Vec<ComplexityRow>> {
    let baseline = base.baseline();
    baseline.validate()?;
    let backbone = baseline.backbone_param_count();
    let mut rows = vec![ComplexityRow {
        block_kind: None,
        placement: Placement::P0,
        total: backbone,
        block_overhead: 0,
        overhead_fraction: 0.0,
    }];
    for kind in BlockKind::ALL {
        for placement in Placement::ALL.into_iter().filter(|&p| p != Placement::P0) {
            let cfg = base.with_blocks(kind, placement);
            cfg.validate()?;
            let extra = cfg.block_param_count();
            rows.push(ComplexityRow {
                block_kind: Some(kind),
                placement,
                total: backbone + extra,
                block_overhead: extra,
                overhead_fraction: extra as f64 / backbone as f64,
            });
        }
    }
    Ok(rows)
}

fn kind_label(kind: Option<BlockKind>) -> &'static str {
    kind.map_or("none", BlockKind::label)
}

pub fn render_complexity(rows: &[ComplexityRow]) -> String {
    let mut out = String::from("| block | placement | params | overhead | overhead % |\n|---|---|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:?} | {} | {} | {:.3} |",
            kind_label(r.block_kind),
            r.placement,
            r.total,
            r.block_overhead,
            100.0 * r.overhead_fraction
        );
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub vol_dice: f64,
    pub surf_dice: f64,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub block_kind: Option<BlockKind>,
    pub placement: Placement,
    pub params: usize,
    pub runs: Vec<SeedResult>,
    pub vol_dice: Stat,
    pub surf_dice: Stat,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

/// Trains `base` once per kind and seed. `None` is the bare backbone; block
/// kinds use `base.net.placement`.
pub fn compare(
    base: &TrainConfig,
    kinds: &[Option<BlockKind>],
    seeds: &[u64],
    mut progress: impl FnMut(Option<BlockKind>, u64, &EpochRecord),
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let net = match kind {
            None => base.net.baseline(),
            Some(k) => {
                let placement = if base.net.placement == Placement::P0 { Placement::P6 } else { base.net.placement };
                base.net.with_blocks(k, placement)
            }
        };
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { net: net.clone(), seed, ..base.clone() };
            let outcome = train(&cfg, |e| progress(kind, seed, e))?;
            runs.push(SeedResult {
                seed,
                vol_dice: outcome.report.mean_foreground_vol_dice,
                surf_dice: outcome.report.mean_foreground_surf_dice,
                wall_clock_seconds: outcome.report.wall_clock_seconds,
            });
        }
        let vols: Vec<f64> = runs.iter().map(|r| r.vol_dice).collect();
        let surfs: Vec<f64> = runs.iter().map(|r| r.surf_dice).collect();
        rows.push(ComparisonRow {
            block_kind: kind,
            placement: net.placement,
            params: net.param_count(),
            runs,
            vol_dice: Stat::of(&vols),
            surf_dice: Stat::of(&surfs),
        });
    }
    Ok(rows)
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("| block | placement | params | seeds | volumetric Dice | surface Dice |\n|---|---|---:|---:|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:?} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
            kind_label(r.block_kind),
            r.placement,
            r.params,
            r.runs.len(),
            r.vol_dice.mean,
            r.vol_dice.std,
            r.surf_dice.mean,
            r.surf_dice.std
        );
    }
    out
}
