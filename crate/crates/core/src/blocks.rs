//! Feature recalibration blocks expressed as compress → process → recalibrate.
//!
//! Every block turns an input map `U` of shape `(C, H, W, D)` into an output
//! `Û` of the same shape by multiplying `U` with sigmoid gates. The gates are
//! derived in three steps: a compressor reduces `U` to an embedding, a
//! processor maps that embedding to gate logits `Ẑ`, and the recalibrator
//! applies `σ(Ẑ)` back onto `U`.
//!
//! | kind | compress | process | gate |
//! |------|----------|---------|------|
//! | cSE  | global average pool | 2-layer bottleneck MLP | per channel |
//! | sSE  | 1×1×1 conv to one channel | identity | per voxel |
//! | scSE | cSE and sSE in parallel, elementwise max of outputs | | |
//! | CBAM | channel attention (avg+max pool, shared MLP), then spatial attention (channel avg/max, 1×1×1 conv) | | |
//! | PE   | per-axis projections broadcast back to full size | 1×1×1 conv, ReLU, 1×1×1 conv | per element |

use serde::{Deserialize, Serialize};

use crate::autodiff::{Aggregation, Axis, PoolMode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Rng, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Cse,
    Sse,
    Scse,
    Cbam,
    Pe,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] = [
        BlockKind::Cse,
        BlockKind::Sse,
        BlockKind::Scse,
        BlockKind::Cbam,
        BlockKind::Pe,
    ];

    /// r = 8 everywhere except scSE, which uses r = 2.
    pub fn default_reduction(self) -> usize {
        match self {
            BlockKind::Scse => 2,
            _ => 8,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BlockKind::Cse => "cSE",
            BlockKind::Sse => "sSE",
            BlockKind::Scse => "scSE",
            BlockKind::Cbam => "CBAM",
            BlockKind::Pe => "PE",
        }
    }
}

/// Projection pooling used by Project & Excite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PePooling {
    Avg,
    Max,
    AvgAndMax,
}

impl PePooling {
    pub const ALL: [PePooling; 3] = [PePooling::Avg, PePooling::Max, PePooling::AvgAndMax];

    fn modes(self) -> &'static [PoolMode] {
        match self {
            PePooling::Avg => &[PoolMode::Avg],
            PePooling::Max => &[PoolMode::Max],
            PePooling::AvgAndMax => &[PoolMode::Avg, PoolMode::Max],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub channels: usize,
    /// Bottleneck ratio; ignored by sSE.
    pub reduction: usize,
    pub pe_pooling: PePooling,
    pub pe_aggregation: Aggregation,
}

impl BlockConfig {
    pub fn new(kind: BlockKind, channels: usize) -> Self {
        BlockConfig {
            kind,
            channels,
            reduction: kind.default_reduction(),
            pe_pooling: PePooling::Avg,
            pe_aggregation: Aggregation::Add,
        }
    }

    pub fn with_reduction(mut self, r: usize) -> Self {
        self.reduction = r;
        self
    }

    pub fn with_pe(mut self, pooling: PePooling, aggregation: Aggregation) -> Self {
        self.pe_pooling = pooling;
        self.pe_aggregation = aggregation;
        self
    }

    fn uses_reduction(&self) -> bool {
        self.kind != BlockKind::Sse
    }

    pub fn reduced(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("block needs at least one channel".into()));
        }
        if self.uses_reduction()
            && (self.reduction == 0 || self.channels % self.reduction != 0)
        {
            return Err(Error::Config(format!(
                "{}: channel count {} is not divisible by reduction {}",
                self.kind.label(),
                self.channels,
                self.reduction
            )));
        }
        Ok(())
    }

    /// Learnable scalars, from the closed forms of each block layout.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let mlp = || 2 * c * c / self.reduction;
        match self.kind {
            BlockKind::Cse => mlp(),
            BlockKind::Sse => c + 1,
            BlockKind::Scse => mlp() + c + 1,
            BlockKind::Cbam => mlp() + 3,
            BlockKind::Pe => mlp() + c + c / self.reduction,
        }
    }
}

/// Bias-free bottleneck MLP `W₂ δ(W₁ z)`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelMlp {
    pub w1: ParamId,
    pub w2: ParamId,
}

/// Single-output 1×1×1 convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct GateConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

/// `V₂ ⋆ δ(V₁ ⋆ Z)`, both 1×1×1 with bias.
#[derive(Clone, Copy, Debug)]
pub struct ExciteConvs {
    pub v1: ParamId,
    pub b1: ParamId,
    pub v2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub enum BlockParams {
    Cse(ChannelMlp),
    Sse(GateConv),
    Scse { cse: ChannelMlp, sse: GateConv },
    Cbam { mlp: ChannelMlp, spatial: GateConv },
    Pe(ExciteConvs),
}

/// Output of a compressor.
#[derive(Clone, Debug)]
pub enum Embedding {
    /// Channel descriptor `(C, 1, 1, 1)`.
    Pooled(Var),
    /// Average- and max-pooled channel descriptors.
    PooledPair { avg: Var, max: Var },
    /// Spatial map `(K, H, W, D)`.
    Map(Var),
    /// One broadcast projection tensor `(C, H, W, D)` per pooling route.
    Projected(Vec<Var>),
}

/// One compress/process/recalibrate unit. Composite blocks (scSE, CBAM) are
/// built from two stages.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    ChannelSe(ChannelMlp),
    SpatialSe(GateConv),
    ChannelAttention(ChannelMlp),
    SpatialAttention(GateConv),
    ProjectExcite {
        convs: ExciteConvs,
        pooling: PePooling,
        aggregation: Aggregation,
    },
}

/// How a block's stages combine.
#[derive(Clone, Copy, Debug)]
pub enum Composition {
    Single(Stage),
    /// Both stages see `U`; outputs merged by elementwise max.
    ParallelMax(Stage, Stage),
    /// The second stage consumes the first stage's output.
    Sequential(Stage, Stage),
}

fn bottleneck(tape: &mut Tape, p: &Bound, mlp: ChannelMlp, z: Var) -> Result<Var> {
    let h = tape.linear(p[mlp.w1], z, None)?;
    let h = tape.relu(h);
    tape.linear(p[mlp.w2], h, None)
}

fn excite(tape: &mut Tape, p: &Bound, convs: ExciteConvs, z: Var) -> Result<Var> {
    let h = tape.conv3d(z, p[convs.v1], Some(p[convs.b1]))?;
    let h = tape.relu(h);
    tape.conv3d(h, p[convs.v2], Some(p[convs.b2]))
}

fn project(tape: &mut Tape, u: Var, mode: PoolMode, aggregation: Aggregation) -> Result<Var> {
    let zh = tape.axis_pool(u, Axis::H, mode);
    let zw = tape.axis_pool(u, Axis::W, mode);
    let zd = tape.axis_pool(u, Axis::D, mode);
    tape.broadcast_combine(zh, zw, zd, aggregation)
}

fn gate(tape: &mut Tape, u: Var, logits: Var) -> Result<Var> {
    let g = tape.sigmoid(logits);
    tape.mul(u, g)
}

impl Stage {
    pub fn compress(&self, tape: &mut Tape, p: &Bound, u: Var) -> Result<Embedding> {
        Ok(match *self {
            Stage::ChannelSe(_) => Embedding::Pooled(tape.global_pool(u, PoolMode::Avg)),
            // Parametric compressor; processing is folded into it.
            Stage::SpatialSe(conv) => {
                Embedding::Map(tape.conv3d(u, p[conv.kernel], Some(p[conv.bias]))?)
            }
            Stage::ChannelAttention(_) => Embedding::PooledPair {
                avg: tape.global_pool(u, PoolMode::Avg),
                max: tape.global_pool(u, PoolMode::Max),
            },
            Stage::SpatialAttention(_) => {
                let avg = tape.channel_pool(u, PoolMode::Avg);
                let max = tape.channel_pool(u, PoolMode::Max);
                Embedding::Map(tape.concat(avg, max)?)
            }
            Stage::ProjectExcite {
                pooling,
                aggregation,
                ..
            } => Embedding::Projected(
                pooling
                    .modes()
                    .iter()
                    .map(|&mode| project(tape, u, mode, aggregation))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// Maps an embedding to gate logits `Ẑ`.
    pub fn process(&self, tape: &mut Tape, p: &Bound, z: &Embedding) -> Result<Var> {
        match (*self, z) {
            (Stage::ChannelSe(mlp), Embedding::Pooled(z)) => bottleneck(tape, p, mlp, *z),
            (Stage::SpatialSe(_), Embedding::Map(z)) => Ok(*z),
            (Stage::ChannelAttention(mlp), Embedding::PooledPair { avg, max }) => {
                let a = bottleneck(tape, p, mlp, *avg)?;
                let m = bottleneck(tape, p, mlp, *max)?;
                tape.add(a, m)
            }
            (Stage::SpatialAttention(conv), Embedding::Map(z)) => {
                tape.conv3d(*z, p[conv.kernel], Some(p[conv.bias]))
            }
            (Stage::ProjectExcite { convs, .. }, Embedding::Projected(zs)) => {
                let mut acc = excite(tape, p, convs, zs[0])?;
                for &z in &zs[1..] {
                    let e = excite(tape, p, convs, z)?;
                    acc = tape.add(acc, e)?;
                }
                Ok(acc)
            }
            (stage, z) => Err(Error::Contract(format!(
                "{stage:?} cannot process embedding {z:?}"
            ))),
        }
    }

    /// `σ(Ẑ)` applied to `u` (broadcast per channel, per voxel or per element).
    pub fn recalibrate(&self, tape: &mut Tape, u: Var, logits: Var) -> Result<Var> {
        gate(tape, u, logits)
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, u: Var) -> Result<Var> {
        let z = self.compress(tape, p, u)?;
        let logits = self.process(tape, p, &z)?;
        self.recalibrate(tape, u, logits)
    }
}

#[derive(Clone, Debug)]
pub struct CprBlock {
    config: BlockConfig,
    params: BlockParams,
}

impl CprBlock {
    /// Registers the block's parameters in `store` under `prefix`. Weights are
    /// fan-in scaled uniform, biases zero.
    pub fn new(config: BlockConfig, store: &mut ParamStore, rng: &mut Rng, prefix: &str) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let cr = if config.uses_reduction() { config.reduced() } else { 1 };
        let mlp = |store: &mut ParamStore, rng: &mut Rng, name: &str| -> Result<ChannelMlp> {
            Ok(ChannelMlp {
                w1: store.add_fan_in(format!("{prefix}.{name}.w1"), Shape::matrix(cr, c)?, c, rng),
                w2: store.add_fan_in(format!("{prefix}.{name}.w2"), Shape::matrix(c, cr)?, cr, rng),
            })
        };
        let gate_conv = |store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize| -> Result<GateConv> {
            Ok(GateConv {
                kernel: store.add_fan_in(format!("{prefix}.{name}.kernel"), Shape::kernel(1, cin, 1)?, cin, rng),
                bias: store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(Shape::vector(1)?)),
            })
        };
        let params = match config.kind {
            BlockKind::Cse => BlockParams::Cse(mlp(store, rng, "cse")?),
            BlockKind::Sse => BlockParams::Sse(gate_conv(store, rng, "sse", c)?),
            BlockKind::Scse => BlockParams::Scse {
                cse: mlp(store, rng, "cse")?,
                sse: gate_conv(store, rng, "sse", c)?,
            },
            BlockKind::Cbam => BlockParams::Cbam {
                mlp: mlp(store, rng, "channel")?,
                spatial: gate_conv(store, rng, "spatial", 2)?,
            },
            BlockKind::Pe => BlockParams::Pe(ExciteConvs {
                v1: store.add_fan_in(format!("{prefix}.pe.v1"), Shape::kernel(cr, c, 1)?, c, rng),
                b1: store.add(format!("{prefix}.pe.b1"), Tensor::zeros(Shape::vector(cr)?)),
                v2: store.add_fan_in(format!("{prefix}.pe.v2"), Shape::kernel(c, cr, 1)?, cr, rng),
                b2: store.add(format!("{prefix}.pe.b2"), Tensor::zeros(Shape::vector(c)?)),
            }),
        };
        Ok(CprBlock { config, params })
    }

    /// A block with its own parameter store.
    pub fn standalone(config: BlockConfig, rng: &mut Rng) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let block = CprBlock::new(config, &mut store, rng, config.kind.label())?;
        Ok((block, store))
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    pub fn params(&self) -> BlockParams {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    pub fn composition(&self) -> Composition {
        match self.params {
            BlockParams::Cse(mlp) => Composition::Single(Stage::ChannelSe(mlp)),
            BlockParams::Sse(conv) => Composition::Single(Stage::SpatialSe(conv)),
            BlockParams::Scse { cse, sse } => {
                Composition::ParallelMax(Stage::ChannelSe(cse), Stage::SpatialSe(sse))
            }
            BlockParams::Cbam { mlp, spatial } => Composition::Sequential(
                Stage::ChannelAttention(mlp),
                Stage::SpatialAttention(spatial),
            ),
            BlockParams::Pe(convs) => Composition::Single(Stage::ProjectExcite {
                convs,
                pooling: self.config.pe_pooling,
                aggregation: self.config.pe_aggregation,
            }),
        }
    }

    fn check_input(&self, tape: &Tape, u: Var) -> Result<()> {
        let s = tape.shape(u);
        if s.c != self.config.channels {
            return Err(Error::shape(format!(
                "{} block expects {} channels, got input {s}",
                self.config.kind.label(),
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Fused forward pass.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, u: Var) -> Result<Var> {
        self.check_input(tape, u)?;
        match self.params {
            BlockParams::Cse(mlp) => cse_forward(tape, p, mlp, u),
            BlockParams::Sse(conv) => sse_forward(tape, p, conv, u),
            BlockParams::Scse { cse, sse } => {
                let a = cse_forward(tape, p, cse, u)?;
                let b = sse_forward(tape, p, sse, u)?;
                tape.maximum(a, b)
            }
            BlockParams::Cbam { mlp, spatial } => cbam_forward(tape, p, mlp, spatial, u),
            BlockParams::Pe(convs) => {
                pe_forward(tape, p, convs, self.config.pe_pooling, self.config.pe_aggregation, u)
            }
        }
    }

    /// Same computation as [`forward`](Self::forward), driven stage by stage
    /// through separate compress, process and recalibrate calls.
    pub fn forward_staged(&self, tape: &mut Tape, p: &Bound, u: Var) -> Result<Var> {
        self.check_input(tape, u)?;
        match self.composition() {
            Composition::Single(s) => s.apply(tape, p, u),
            Composition::ParallelMax(a, b) => {
                let ua = a.apply(tape, p, u)?;
                let ub = b.apply(tape, p, u)?;
                tape.maximum(ua, ub)
            }
            Composition::Sequential(a, b) => {
                let mid = a.apply(tape, p, u)?;
                b.apply(tape, p, mid)
            }
        }
    }
}

/// `Û_c = σ(W₂ δ(W₁ avgpool(U)))_c · u_c`
pub fn cse_forward(tape: &mut Tape, p: &Bound, mlp: ChannelMlp, u: Var) -> Result<Var> {
    let z = tape.global_pool(u, PoolMode::Avg);
    let h = tape.linear(p[mlp.w1], z, None)?;
    let h = tape.relu(h);
    let zhat = tape.linear(p[mlp.w2], h, None)?;
    let g = tape.sigmoid(zhat);
    tape.mul(u, g)
}

/// `Û_c = σ(S ⋆ U) · u_c`
pub fn sse_forward(tape: &mut Tape, p: &Bound, conv: GateConv, u: Var) -> Result<Var> {
    let z = tape.conv3d(u, p[conv.kernel], Some(p[conv.bias]))?;
    let g = tape.sigmoid(z);
    tape.mul(u, g)
}

/// Channel attention followed by spatial attention on its output.
pub fn cbam_forward(tape: &mut Tape, p: &Bound, mlp: ChannelMlp, spatial: GateConv, u: Var) -> Result<Var> {
    let za = tape.global_pool(u, PoolMode::Avg);
    let zm = tape.global_pool(u, PoolMode::Max);
    let ha = tape.linear(p[mlp.w1], za, None)?;
    let ha = tape.relu(ha);
    let ha = tape.linear(p[mlp.w2], ha, None)?;
    let hm = tape.linear(p[mlp.w1], zm, None)?;
    let hm = tape.relu(hm);
    let hm = tape.linear(p[mlp.w2], hm, None)?;
    let zhat = tape.add(ha, hm)?;
    let g = tape.sigmoid(zhat);
    let u1 = tape.mul(u, g)?;

    let ca = tape.channel_pool(u1, PoolMode::Avg);
    let cm = tape.channel_pool(u1, PoolMode::Max);
    let z = tape.concat(ca, cm)?;
    let zhat = tape.conv3d(z, p[spatial.kernel], Some(p[spatial.bias]))?;
    let g = tape.sigmoid(zhat);
    tape.mul(u1, g)
}

/// Project & Excite. With [`PePooling::AvgAndMax`] both projections pass the
/// shared convolutions and their logits are summed before the sigmoid.
pub fn pe_forward(
    tape: &mut Tape,
    p: &Bound,
    convs: ExciteConvs,
    pooling: PePooling,
    aggregation: Aggregation,
    u: Var,
) -> Result<Var> {
    let mut logits: Option<Var> = None;
    for &mode in pooling.modes() {
        let zh = tape.axis_pool(u, Axis::H, mode);
        let zw = tape.axis_pool(u, Axis::W, mode);
        let zd = tape.axis_pool(u, Axis::D, mode);
        let z = tape.broadcast_combine(zh, zw, zd, aggregation)?;
        let h = tape.conv3d(z, p[convs.v1], Some(p[convs.b1]))?;
        let h = tape.relu(h);
        let zhat = tape.conv3d(h, p[convs.v2], Some(p[convs.b2]))?;
        logits = Some(match logits {
            None => zhat,
            Some(acc) => tape.add(acc, zhat)?,
        });
    }
    let g = tape.sigmoid(logits.expect("at least one pooling route"));
    tape.mul(u, g)
}
