//! Finite-difference gradient suite over every tape op, loss and block.

use serde::Serialize;

use crate::autodiff::{grad_check_sampled, Aggregation, Axis, PoolMode, Tape, Var};
use crate::blocks::{BlockConfig, BlockKind, CprBlock, PePooling};
use crate::error::Result;
use crate::labels::LabelVolume;
use crate::losses::{combined_loss, soft_dice_loss, weighted_ce, ClassWeights, DICE_SMOOTH};
use crate::params::Bound;
use crate::tensor::{Rng, Shape, Tensor};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub entries: usize,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    shapes: Vec<Shape>,
    build: Build,
}

fn s(c: usize, h: usize, w: usize, d: usize) -> Shape {
    Shape::new(c, h, w, d).expect("suite shapes are non-empty")
}

/// Contracts `out` with fixed pseudo-random weights so every output entry
/// contributes to the checked scalar.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(tape.shape(out), &mut Rng::new(seed), -1.0, 1.0);
    let w = tape.constant(w);
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

fn op_case(name: &str, shapes: Vec<Shape>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    let seed = name.bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    Case {
        name: name.to_string(),
        shapes,
        build: Box::new(move |t, v| {
            let out = f(t, v)?;
            probe(t, out, seed)
        }),
    }
}

fn op_cases() -> Vec<Case> {
    let x = s(4, 5, 5, 5);
    let mut cases = vec![
        op_case("linear", vec![s(3, 4, 1, 1), s(4, 1, 1, 1), s(3, 1, 1, 1)], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        op_case("conv3d k=1", vec![x, Shape::kernel(3, 4, 1).unwrap(), s(3, 1, 1, 1)], |t, v| {
            t.conv3d(v[0], v[1], Some(v[2]))
        }),
        op_case("conv3d k=3", vec![x, Shape::kernel(3, 4, 3).unwrap(), s(3, 1, 1, 1)], |t, v| {
            t.conv3d(v[0], v[1], Some(v[2]))
        }),
        op_case("relu", vec![x], |t, v| Ok(t.relu(v[0]))),
        op_case("sigmoid", vec![x], |t, v| Ok(t.sigmoid(v[0]))),
        op_case("channel_pool avg", vec![x], |t, v| Ok(t.channel_pool(v[0], PoolMode::Avg))),
        op_case("channel_pool max", vec![x], |t, v| Ok(t.channel_pool(v[0], PoolMode::Max))),
        op_case("mul full", vec![x, x], |t, v| t.mul(v[0], v[1])),
        op_case("mul spatial gate", vec![x, s(1, 5, 5, 5)], |t, v| t.mul(v[0], v[1])),
        op_case("mul channel gate", vec![x, s(4, 1, 1, 1)], |t, v| t.mul(v[0], v[1])),
        op_case("add", vec![x, x], |t, v| t.add(v[0], v[1])),
        op_case("maximum", vec![x, x], |t, v| t.maximum(v[0], v[1])),
        op_case("scale", vec![x], |t, v| Ok(t.scale(v[0], -1.7))),
        op_case("concat", vec![x, s(2, 5, 5, 5)], |t, v| t.concat(v[0], v[1])),
        op_case("maxpool_down2", vec![s(4, 4, 6, 4)], |t, v| t.maxpool_down2(v[0])),
        op_case("upsample_nearest2", vec![x], |t, v| Ok(t.upsample_nearest2(v[0]))),
        op_case("instance_norm", vec![x, s(4, 1, 1, 1), s(4, 1, 1, 1)], |t, v| {
            t.instance_norm(v[0], v[1], v[2], 1e-5)
        }),
        op_case("log_softmax", vec![x], |t, v| Ok(t.log_softmax_channels(v[0]))),
        op_case("sum", vec![x], |t, v| Ok(t.sum(v[0]))),
    ];
    for mode in [PoolMode::Avg, PoolMode::Max] {
        cases.push(op_case(&format!("global_pool {mode:?}"), vec![x], move |t, v| Ok(t.global_pool(v[0], mode))));
        for axis in Axis::ALL {
            cases.push(op_case(&format!("axis_pool {axis:?} {mode:?}"), vec![x], move |t, v| {
                Ok(t.axis_pool(v[0], axis, mode))
            }));
        }
    }
    for agg in [Aggregation::Add, Aggregation::Max, Aggregation::Mult] {
        cases.push(op_case(
            &format!("broadcast_combine {agg:?}"),
            vec![s(4, 5, 1, 1), s(4, 1, 5, 1), s(4, 1, 1, 5)],
            move |t, v| t.broadcast_combine(v[0], v[1], v[2], agg),
        ));
    }

    let labels = LabelVolume::new(5, 5, 5, (0..125).map(|i| ((i * 7 + i / 5) % 4) as u8).collect()).unwrap();
    let weights = ClassWeights(vec![0.4, 1.0, 2.2, 1.3]);
    let (l1, w1) = (labels.clone(), weights.clone());
    cases.push(Case {
        name: "weighted_ce".into(),
        shapes: vec![x],
        build: Box::new(move |t, v| weighted_ce(t, v[0], &l1, &w1)),
    });
    let l2 = labels.clone();
    cases.push(Case {
        name: "soft_dice".into(),
        shapes: vec![x],
        build: Box::new(move |t, v| soft_dice_loss(t, v[0], &l2, DICE_SMOOTH)),
    });
    cases.push(Case {
        name: "combined_loss".into(),
        shapes: vec![x],
        build: Box::new(move |t, v| combined_loss(t, v[0], &labels, &weights, DICE_SMOOTH)),
    });
    cases
}

/// cSE, sSE, scSE, CBAM and the nine PE pooling/aggregation variants, at
/// C = 4 with r = 2.
pub fn block_variants() -> Vec<BlockConfig> {
    let mut out: Vec<BlockConfig> = [BlockKind::Cse, BlockKind::Sse, BlockKind::Scse, BlockKind::Cbam]
        .into_iter()
        .map(|k| BlockConfig::new(k, 4).with_reduction(2))
        .collect();
    for pooling in PePooling::ALL {
        for agg in [Aggregation::Add, Aggregation::Max, Aggregation::Mult] {
            out.push(BlockConfig::new(BlockKind::Pe, 4).with_reduction(2).with_pe(pooling, agg));
        }
    }
    out
}

pub fn block_label(cfg: &BlockConfig) -> String {
    match cfg.kind {
        BlockKind::Pe => format!("PE {:?}/{:?}", cfg.pe_pooling, cfg.pe_aggregation),
        k => k.label().to_string(),
    }
}

fn block_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (i, cfg) in block_variants().into_iter().enumerate() {
        let (block, store) = CprBlock::standalone(cfg, &mut Rng::new(500 + i as u64))?;
        let mut shapes = vec![s(4, 5, 5, 5)];
        shapes.extend(store.iter().map(|(_, t)| t.shape()));
        let name = block_label(&cfg);
        let seed = 900 + i as u64;
        cases.push(Case {
            name,
            shapes,
            build: Box::new(move |t, v| {
                let bound = Bound::from_vars(v[1..].to_vec());
                let out = block.forward(t, &bound, v[0])?;
                probe(t, out, seed)
            }),
        });
    }
    Ok(cases)
}

fn run(cases: Vec<Case>, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    cases
        .into_iter()
        .map(|case| {
            let shapes = case.shapes.clone();
            let report = grad_check_sampled(
                &case.build,
                |r| shapes.iter().map(|&sh| Tensor::uniform(sh, r, -1.0, 1.0)).collect(),
                &mut rng,
                SUITE_EPS,
            )?;
            Ok(CheckResult {
                name: case.name,
                max_rel_error: report.max_rel_error,
                tol: SUITE_TOL,
                entries: report.entries,
                passed: report.passed(SUITE_TOL),
            })
        })
        .collect()
}

/// Checks every tape op and loss on random inputs at C = 4, 5³.
pub fn op_suite() -> Result<Vec<CheckResult>> {
    run(op_cases(), 1)
}

/// Checks every block variant on random inputs and parameters at C = 4, 5³.
pub fn block_suite() -> Result<Vec<CheckResult>> {
    run(block_cases()?, 2)
}

pub fn gradient_suite() -> Result<Vec<CheckResult>> {
    let mut all = op_suite()?;
    all.extend(block_suite()?);
    Ok(all)
}
