//! Scaled 3D U-net with optional recalibration blocks.
//!
//! Three encoders, a bottleneck and three decoders, each made of two
//! `conv 3×3×3 → instance norm → relu` units. Only the first two encoders
//! downsample (2³ max pooling), and only the last two decoders upsample
//! (nearest ×2 followed by a 3×3×3 conv). Encoder outputs reach the matching
//! decoder through channel concatenation, skip first. A placement decides which
//! stages carry a trailing block.

mod weights;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Aggregation, Tape, Var};
use crate::blocks::{BlockConfig, BlockKind, CprBlock, PePooling};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Rng, Shape, Tensor};

pub use weights::{load_weights, read_weights, save_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

const NORM_EPS: f64 = 1e-5;

/// Network stages in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Encoder1,
    Encoder2,
    Encoder3,
    Bottleneck,
    Decoder1,
    Decoder2,
    Decoder3,
}

impl Position {
    pub const ALL: [Position; 7] = [
        Position::Encoder1,
        Position::Encoder2,
        Position::Encoder3,
        Position::Bottleneck,
        Position::Decoder1,
        Position::Decoder2,
        Position::Decoder3,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Position::Encoder1 => "enc1",
            Position::Encoder2 => "enc2",
            Position::Encoder3 => "enc3",
            Position::Bottleneck => "bottleneck",
            Position::Decoder1 => "dec1",
            Position::Decoder2 => "dec2",
            Position::Decoder3 => "dec3",
        }
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Position::Encoder1 | Position::Encoder2 | Position::Encoder3)
    }

    pub fn is_decoder(self) -> bool {
        matches!(self, Position::Decoder1 | Position::Decoder2 | Position::Decoder3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    P0,
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
}

impl Placement {
    pub const ALL: [Placement; 7] = [
        Placement::P0,
        Placement::P1,
        Placement::P2,
        Placement::P3,
        Placement::P4,
        Placement::P5,
        Placement::P6,
    ];

    pub fn covers(self, pos: Position) -> bool {
        use Placement::*;
        let (enc, bottleneck, dec) = match self {
            P0 => (false, false, false),
            P1 => (true, false, false),
            P2 => (false, false, true),
            P3 => (false, true, false),
            P4 => (true, false, true),
            P5 => (true, true, false),
            P6 => (true, true, true),
        };
        if pos.is_encoder() {
            enc
        } else if pos.is_decoder() {
            dec
        } else {
            bottleneck
        }
    }

    pub fn block_count(self) -> usize {
        Position::ALL.iter().filter(|&&p| self.covers(p)).count()
    }
}

mod block_choice {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::blocks::BlockKind;

    pub fn serialize<S: Serializer>(v: &Option<BlockKind>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_str("none"),
            Some(k) => k.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BlockKind>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Choice {
            Kind(BlockKind),
            Other(String),
        }
        match Choice::deserialize(d)? {
            Choice::Kind(k) => Ok(Some(k)),
            Choice::Other(s) if s == "none" => Ok(None),
            Choice::Other(s) => Err(serde::de::Error::custom(format!("unknown block kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    /// Widths `[a, b]` of the first encoder. Later stages scale them by 2, 4
    /// and 8; decoders use `4b`, `2b`, `b`.
    pub encoder_channels: Vec<usize>,
    #[serde(with = "block_choice")]
    pub block_kind: Option<BlockKind>,
    pub placement: Placement,
    /// Reduction factor; `None` picks the block kind's default.
    #[serde(default)]
    pub r: Option<usize>,
    #[serde(default = "default_pe_pooling")]
    pub pe_pooling: PePooling,
    #[serde(default = "default_pe_aggregation")]
    pub pe_aggregation: Aggregation,
}

fn default_pe_pooling() -> PePooling {
    PePooling::Avg
}

fn default_pe_aggregation() -> Aggregation {
    Aggregation::Add
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            n_classes: 4,
            encoder_channels: vec![16, 32],
            block_kind: Some(BlockKind::Pe),
            placement: Placement::P6,
            r: None,
            pe_pooling: PePooling::Avg,
            pe_aggregation: Aggregation::Add,
        }
    }
}

/// Convolution units of one stage, as `(in, out)` channel pairs.
type StageWidths = [(usize, usize); 2];

impl NetConfig {
    pub fn baseline(&self) -> NetConfig {
        NetConfig {
            block_kind: None,
            placement: Placement::P0,
            ..self.clone()
        }
    }

    pub fn with_blocks(&self, kind: BlockKind, placement: Placement) -> NetConfig {
        NetConfig {
            block_kind: Some(kind),
            placement,
            ..self.clone()
        }
    }

    fn base(&self) -> (usize, usize) {
        (self.encoder_channels[0], self.encoder_channels[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if self.encoder_channels.len() != 2 || self.encoder_channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder_channels must be two positive widths, got {:?}",
                self.encoder_channels
            )));
        }
        if self.block_kind.is_none() && self.placement != Placement::P0 {
            return Err(Error::Config(format!(
                "placement {:?} needs a block kind",
                self.placement
            )));
        }
        for pos in Position::ALL {
            if let Some(b) = self.block_config(pos) {
                b.validate()?;
            }
        }
        Ok(())
    }

    pub fn stage_widths(&self, pos: Position) -> StageWidths {
        let (a, b) = self.base();
        match pos {
            Position::Encoder1 => [(self.in_channels, a), (a, b)],
            Position::Encoder2 => [(b, 2 * a), (2 * a, 2 * b)],
            Position::Encoder3 => [(2 * b, 4 * a), (4 * a, 4 * b)],
            Position::Bottleneck => [(4 * b, 8 * a), (8 * a, 8 * b)],
            Position::Decoder1 => [(4 * b + 8 * b, 4 * b), (4 * b, 4 * b)],
            Position::Decoder2 => [(2 * b + 2 * b, 2 * b), (2 * b, 2 * b)],
            Position::Decoder3 => [(b + b, b), (b, b)],
        }
    }

    pub fn stage_out(&self, pos: Position) -> usize {
        self.stage_widths(pos)[1].1
    }

    /// `(in, out)` widths of the two upsampling convolutions.
    pub fn up_widths(&self) -> [(usize, usize); 2] {
        let (_, b) = self.base();
        [(4 * b, 2 * b), (2 * b, b)]
    }

    pub fn block_config(&self, pos: Position) -> Option<BlockConfig> {
        let kind = self.block_kind?;
        if !self.placement.covers(pos) {
            return None;
        }
        let mut cfg = BlockConfig::new(kind, self.stage_out(pos)).with_pe(self.pe_pooling, self.pe_aggregation);
        if let Some(r) = self.r {
            cfg = cfg.with_reduction(r);
        }
        Some(cfg)
    }

    /// Learnable scalars of the network without blocks.
    pub fn backbone_param_count(&self) -> usize {
        let unit = |(cin, cout): (usize, usize)| 27 * cin * cout + 2 * cout;
        let stages: usize = Position::ALL
            .iter()
            .flat_map(|&p| self.stage_widths(p))
            .map(unit)
            .sum();
        let ups: usize = self.up_widths().iter().map(|&(cin, cout)| 27 * cin * cout + cout).sum();
        let (_, b) = self.base();
        stages + ups + b * self.n_classes + self.n_classes
    }

    pub fn block_param_count(&self) -> usize {
        Position::ALL
            .iter()
            .filter_map(|&p| self.block_config(p))
            .map(|b| b.param_count())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.backbone_param_count() + self.block_param_count()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("NetConfig always serialises");
        Sha256::digest(&json).into()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvUnit {
    kernel: ParamId,
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct BiasedConv {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct NetStage {
    position: Position,
    units: [ConvUnit; 2],
    block: Option<CprBlock>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockOverhead {
    pub position: Position,
    pub channels: usize,
    pub params: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub backbone: usize,
    pub block_overhead: usize,
    /// `block_overhead / backbone`.
    pub overhead_fraction: f64,
    pub blocks: Vec<BlockOverhead>,
}

#[derive(Clone, Debug)]
pub struct SegNet {
    config: NetConfig,
    store: ParamStore,
    stages: Vec<NetStage>,
    ups: [BiasedConv; 2],
    classifier: BiasedConv,
}

impl SegNet {
    /// Backbone weights come from `rng`; block weights from a separate stream
    /// seeded by its first draw, so every placement shares the backbone
    /// initialisation of a given seed.
    pub fn build(config: NetConfig, rng: &mut Rng) -> Result<SegNet> {
        config.validate()?;
        let mut block_rng = Rng::stream(rng.next_u64(), 1);
        let mut store = ParamStore::new();

        let conv_unit = |store: &mut ParamStore, rng: &mut Rng, name: String, (cin, cout): (usize, usize)| -> Result<ConvUnit> {
            Ok(ConvUnit {
                kernel: store.add_fan_in(format!("{name}.kernel"), Shape::kernel(cout, cin, 3)?, 27 * cin, rng),
                gain: store.add(format!("{name}.gain"), Tensor::full(Shape::vector(cout)?, 1.0)),
                bias: store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(cout)?)),
            })
        };
        let biased = |store: &mut ParamStore, rng: &mut Rng, name: &str, (cin, cout): (usize, usize), k: usize| -> Result<BiasedConv> {
            Ok(BiasedConv {
                kernel: store.add_fan_in(format!("{name}.kernel"), Shape::kernel(cout, cin, k)?, k * k * k * cin, rng),
                bias: store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(cout)?)),
            })
        };

        let mut stages = Vec::with_capacity(7);
        let mut ups = Vec::with_capacity(2);
        for pos in Position::ALL {
            if pos == Position::Decoder2 || pos == Position::Decoder3 {
                let i = ups.len();
                ups.push(biased(&mut store, rng, &format!("up{}", i + 1), config.up_widths()[i], 3)?);
            }
            let [w1, w2] = config.stage_widths(pos);
            let units = [
                conv_unit(&mut store, rng, format!("{}.conv1", pos.label()), w1)?,
                conv_unit(&mut store, rng, format!("{}.conv2", pos.label()), w2)?,
            ];
            let block = config
                .block_config(pos)
                .map(|b| CprBlock::new(b, &mut store, &mut block_rng, &format!("{}.block", pos.label())))
                .transpose()?;
            stages.push(NetStage { position: pos, units, block });
        }
        let (_, b) = config.base();
        let classifier = biased(&mut store, rng, "classifier", (b, config.n_classes), 1)?;
        Ok(SegNet {
            config,
            store,
            stages,
            ups: [ups[0], ups[1]],
            classifier,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> impl Iterator<Item = (Position, &CprBlock)> {
        self.stages.iter().filter_map(|s| s.block.as_ref().map(|b| (s.position, b)))
    }

    pub fn block_count(&self) -> usize {
        self.blocks().count()
    }

    /// Logits `(n_classes, H, W, D)` for `x` of shape `(in_channels, H, W, D)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.forward_hooked(tape, p, x, &mut |tape, stage, u| match &stage.block {
            Some(block) => block.forward(tape, p, u),
            None => Ok(u),
        })
    }

    /// Inference on a fresh tape with frozen parameters.
    pub fn predict(&self, volume: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(volume.clone());
        let logits = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(logits).clone())
    }

    fn forward_hooked(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        hook: &mut dyn FnMut(&mut Tape, &NetStage, Var) -> Result<Var>,
    ) -> Result<Var> {
        let s = tape.shape(x);
        if s.c != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {s}",
                self.config.in_channels
            )));
        }
        if s.h % 4 != 0 || s.w % 4 != 0 || s.d % 4 != 0 {
            return Err(Error::shape(format!("spatial extents of {s} must be divisible by 4")));
        }
        let mut stage = |tape: &mut Tape, i: usize, input: Var| -> Result<Var> {
            let st = &self.stages[i];
            let mut h = input;
            for unit in &st.units {
                h = tape.conv3d(h, p[unit.kernel], None)?;
                h = tape.instance_norm(h, p[unit.gain], p[unit.bias], NORM_EPS)?;
                h = tape.relu(h);
            }
            hook(tape, st, h)
        };
        let up = |tape: &mut Tape, conv: BiasedConv, input: Var| -> Result<Var> {
            let u = tape.upsample_nearest2(input);
            tape.conv3d(u, p[conv.kernel], Some(p[conv.bias]))
        };

        let e1 = stage(tape, 0, x)?;
        let down = tape.maxpool_down2(e1)?;
        let e2 = stage(tape, 1, down)?;
        let down = tape.maxpool_down2(e2)?;
        let e3 = stage(tape, 2, down)?;
        let bn = stage(tape, 3, e3)?;
        let cat = tape.concat(e3, bn)?;
        let d1 = stage(tape, 4, cat)?;
        let u = up(tape, self.ups[0], d1)?;
        let cat = tape.concat(e2, u)?;
        let d2 = stage(tape, 5, cat)?;
        let u = up(tape, self.ups[1], d2)?;
        let cat = tape.concat(e1, u)?;
        let d3 = stage(tape, 6, cat)?;
        tape.conv3d(d3, p[self.classifier.kernel], Some(p[self.classifier.bias]))
    }

    pub fn param_report(&self) -> ParamReport {
        let total = self.store.scalar_count();
        let blocks: Vec<BlockOverhead> = self
            .blocks()
            .map(|(position, b)| BlockOverhead {
                position,
                channels: b.config().channels,
                params: b.param_count(),
            })
            .collect();
        let block_overhead: usize = blocks.iter().map(|b| b.params).sum();
        let backbone = total - block_overhead;
        ParamReport {
            total,
            backbone,
            block_overhead,
            overhead_fraction: block_overhead as f64 / backbone as f64,
            blocks,
        }
    }
}

#[cfg(test)]
mod tests;
