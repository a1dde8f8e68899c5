//! The SK-Unet encoder/decoder.
//!
//! Encoder level `i` runs a conv block and an SE-Res block at
//! `base_width * 2^i` channels, keeps the result as the skip tensor and then
//! max-pools. The bottleneck has the same structure one level deeper. Each
//! decoder level upsamples, halves channels with a 3x3 conv, concatenates
//! the skip, fuses with a conv block and refines with an SK block. A 1x1 conv
//! maps to class logits.

pub mod checkpoint;
mod loss;
mod optim;
mod train;

pub use loss::{loss_terms, predict_labels, segmentation_loss, SOFT_DICE_SMOOTH};
pub use optim::Adam;
pub use train::{hard_dice, train, EpochLog, Sample, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::blocks::{
    Conv2dLayer, ConvBlock, ParamStore, SeResBlock, SkBlock, DEFAULT_L_MIN, DEFAULT_REDUCTION,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels at full resolution.
    pub base_width: usize,
    /// Number of pooling stages.
    pub depth: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub use_se: bool,
    pub use_sk: bool,
    pub seed: u64,
    pub reduction_ratio: usize,
    pub l_min: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            depth: 4,
            num_classes: 4,
            in_channels: 3,
            use_se: true,
            use_sk: true,
            seed: 0,
            reduction_ratio: DEFAULT_REDUCTION,
            l_min: DEFAULT_L_MIN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, detail: String| Err(Error::Config { field, detail });
        if self.depth < 1 {
            return bad("depth", format!("must be >= 1, got {}", self.depth));
        }
        if self.base_width < 4 {
            return bad("base_width", format!("must be >= 4, got {}", self.base_width));
        }
        if self.num_classes < 2 {
            return bad("num_classes", format!("must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels < 1 {
            return bad("in_channels", "must be >= 1".into());
        }
        if self.reduction_ratio == 0 || !self.base_width.is_multiple_of(self.reduction_ratio) {
            return bad(
                "reduction_ratio",
                format!(
                    "{} must divide base_width {}",
                    self.reduction_ratio, self.base_width
                ),
            );
        }
        if self.l_min < 8 {
            return bad("l_min", format!("must be >= 8, got {}", self.l_min));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub conv: ConvBlock,
    pub se: SeResBlock,
}

impl EncoderLevel {
    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        self.se.forward(tape, p, y)
    }
}

/// Final refinement of a decoder level.
#[derive(Clone, Debug)]
pub enum Refine {
    Sk(SkBlock),
    Plain(ConvBlock),
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up: Conv2dLayer,
    pub fuse: ConvBlock,
    pub refine: Refine,
}

/// Counts of block kinds, used to audit ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockAudit {
    pub se_res_gated: usize,
    pub residual_plain: usize,
    pub sk: usize,
    pub refine_plain: usize,
}

impl BlockAudit {
    pub fn attention_blocks(&self) -> usize {
        self.se_res_gated + self.sk
    }
}

/// Handles recorded during a forward pass.
pub struct ForwardTrace {
    /// Encoder outputs before pooling, by level.
    pub encoder: Vec<Var>,
    pub bottleneck: Var,
    /// The concatenated `[skip, upsampled]` tensor, by decoder level.
    pub concat: Vec<Var>,
    /// Decoder outputs, by level.
    pub decoder: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Vec<EncoderLevel>,
    pub bottleneck: EncoderLevel,
    /// Indexed by level (0 = full resolution); executed deepest first.
    pub decoder: Vec<DecoderLevel>,
    pub head: Conv2dLayer,
}

impl Model {
    /// Builds and He-initializes a model from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (r, l_min) = (cfg.reduction_ratio, cfg.l_min);

        let mut make_level = |store: &mut ParamStore, name: &str, cin: usize, c: usize| -> Result<EncoderLevel> {
            Ok(EncoderLevel {
                conv: ConvBlock::new(store, &format!("{name}.conv"), cin, c, &mut rng),
                se: SeResBlock::new(store, &format!("{name}.se"), c, r, l_min, cfg.use_se, &mut rng)?,
            })
        };
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for level in 0..cfg.depth {
            let c = cfg.width(level);
            encoder.push(make_level(&mut store, &format!("enc{level}"), cin, c)?);
            cin = c;
        }
        let bottleneck = make_level(&mut store, "bottleneck", cin, cfg.width(cfg.depth))?;

        let mut decoder = Vec::with_capacity(cfg.depth);
        for level in (0..cfg.depth).rev() {
            let (c, below) = (cfg.width(level), cfg.width(level + 1));
            let name = format!("dec{level}");
            let up = Conv2dLayer::new(&mut store, &format!("{name}.up"), below, c, 3, 1, &mut rng);
            let fuse = ConvBlock::new(&mut store, &format!("{name}.fuse"), 2 * c, c, &mut rng);
            let refine = if cfg.use_sk {
                Refine::Sk(SkBlock::new(&mut store, &format!("{name}.sk"), c, r, l_min, &mut rng)?)
            } else {
                Refine::Plain(ConvBlock::new(&mut store, &format!("{name}.refine"), c, c, &mut rng))
            };
            decoder.push(DecoderLevel { up, fuse, refine });
        }
        decoder.reverse();
        let head = Conv2dLayer::new(&mut store, "head", cfg.width(0), cfg.num_classes, 1, 1, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            params: store,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn audit(&self) -> BlockAudit {
        let mut a = BlockAudit::default();
        for level in self.encoder.iter().chain(std::iter::once(&self.bottleneck)) {
            if level.se.excitation.is_some() {
                a.se_res_gated += 1;
            } else {
                a.residual_plain += 1;
            }
        }
        for d in &self.decoder {
            match d.refine {
                Refine::Sk(_) => a.sk += 1,
                Refine::Plain(_) => a.refine_plain += 1,
            }
        }
        a
    }

    /// Hex SHA-256 over parameter names, shapes and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        match shape {
            [_, c, h, w] if *c == self.config.in_channels => {
                if h % m != 0 || w % m != 0 || *h == 0 || *w == 0 {
                    return Err(Error::shape(
                        "forward",
                        format!(
                            "spatial size {h}x{w} must be a nonzero multiple of {m} (2^depth); \
                             crop the input with preprocess first"
                        ),
                    ));
                }
                Ok(())
            }
            _ => Err(Error::shape(
                "forward",
                format!(
                    "expected [N, {}, H, W] input, got {shape:?}",
                    self.config.in_channels
                ),
            )),
        }
    }

    /// Logits `[N, num_classes, H, W]` using parameters bound at `p`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, x)?.logits)
    }

    pub fn forward_traced(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<ForwardTrace> {
        self.check_input(tape.shape(x))?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for level in &self.encoder {
            let y = level.forward(tape, p, h)?;
            skips.push(y);
            h = tape.maxpool2d(y)?;
        }
        let bottleneck = self.bottleneck.forward(tape, p, h)?;
        h = bottleneck;
        let mut concat = vec![bottleneck; self.config.depth];
        let mut decoder = vec![bottleneck; self.config.depth];
        for (level, dec) in self.decoder.iter().enumerate().rev() {
            let up = tape.upsample_nearest2x(h)?;
            let up = dec.up.forward(tape, p, up)?;
            let cat = tape.concat_channels(skips[level], up)?;
            let y = dec.fuse.forward(tape, p, cat)?;
            h = match &dec.refine {
                Refine::Sk(sk) => sk.forward(tape, p, y)?,
                Refine::Plain(cb) => cb.forward(tape, p, y)?,
            };
            concat[level] = cat;
            decoder[level] = h;
        }
        let logits = self.head.forward(tape, p, h)?;
        Ok(ForwardTrace {
            encoder: skips,
            bottleneck,
            concat,
            decoder,
            logits,
        })
    }

    /// Inference without gradient tracking.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let x = tape.constant(batch.clone());
        let logits = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(logits).clone())
    }
}
