//! Building blocks of the network: the plain conv-norm-relu unit, the
//! squeeze-and-excitation residual block used in the encoder, and the
//! two-branch selective-kernel block used in the decoder.

mod params;

pub use params::{he_normal, Conv2dLayer, DenseLayer, NormLayer, ParamId, ParamStore};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const DEFAULT_REDUCTION: usize = 8;
pub const DEFAULT_L_MIN: usize = 8;

fn check_channels(op: &'static str, tape: &Tape, x: Var, expected: usize) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != expected {
        return Err(Error::shape(
            op,
            format!("block expects {expected} channels, input shape is {shape:?}"),
        ));
    }
    Ok(())
}

/// Hidden width of an attention bottleneck: `max(C / r, l_min)`.
pub fn reduced_width(channels: usize, reduction: usize, l_min: usize) -> usize {
    (channels / reduction).max(l_min)
}

/// 3x3 conv (padding 1) -> instance norm -> relu.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2dLayer,
    pub norm: NormLayer,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::with_dilation(store, name, cin, cout, 1, rng)
    }

    pub fn with_dilation(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2dLayer::new(store, &format!("{name}.conv"), cin, cout, 3, dilation, rng),
            norm: NormLayer::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        check_channels("conv_block", tape, x, self.conv.in_channels)?;
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        tape.relu(y)
    }
}

/// Squeeze-and-excitation residual block.
///
/// `u = cbr(cbr(x))`, `s = sigmoid(fc_expand(relu(fc_reduce(gap(u)))))`,
/// output `relu(x + u * s)`. Without the gate (`excitation == None`) this is
/// the plain residual block `relu(x + u)`.
#[derive(Clone, Debug)]
pub struct SeResBlock {
    pub channels: usize,
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub excitation: Option<Excitation>,
}

#[derive(Clone, Debug)]
pub struct Excitation {
    pub fc_reduce: DenseLayer,
    pub fc_expand: DenseLayer,
    pub reduction_ratio: usize,
}

/// Intermediate values of an SE-Res forward pass.
pub struct SeResTrace {
    pub output: Var,
    pub residual: Var,
    pub gate: Option<Var>,
}

impl SeResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction_ratio: usize,
        l_min: usize,
        gated: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction_ratio == 0 || !channels.is_multiple_of(reduction_ratio) {
            return Err(Error::Config {
                field: "reduction_ratio",
                detail: format!("{reduction_ratio} must be >= 1 and divide {channels} channels"),
            });
        }
        let conv1 = ConvBlock::new(store, &format!("{name}.conv1"), channels, channels, rng);
        let conv2 = ConvBlock::new(store, &format!("{name}.conv2"), channels, channels, rng);
        let excitation = gated.then(|| {
            let hidden = reduced_width(channels, reduction_ratio, l_min);
            Excitation {
                fc_reduce: DenseLayer::new(store, &format!("{name}.fc_reduce"), channels, hidden, rng),
                fc_expand: DenseLayer::new(store, &format!("{name}.fc_expand"), hidden, channels, rng),
                reduction_ratio,
            }
        });
        Ok(Self {
            channels,
            conv1,
            conv2,
            excitation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, x)?.output)
    }

    pub fn forward_traced(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<SeResTrace> {
        check_channels("se_res", tape, x, self.channels)?;
        let u = self.conv1.forward(tape, p, x)?;
        let u = self.conv2.forward(tape, p, u)?;
        let (scaled, gate) = match &self.excitation {
            Some(ex) => {
                let z = tape.global_avg_pool(u)?;
                let z = ex.fc_reduce.forward(tape, p, z)?;
                let z = tape.relu(z)?;
                let z = ex.fc_expand.forward(tape, p, z)?;
                let s = tape.sigmoid(z)?;
                (tape.mul_channelwise(u, s)?, Some(s))
            }
            None => (u, None),
        };
        let sum = tape.add(x, scaled)?;
        Ok(SeResTrace {
            output: tape.relu(sum)?,
            residual: u,
            gate,
        })
    }
}

/// Selective-kernel block with a 3x3 branch and a dilated 3x3 branch
/// (5x5 receptive field), fused by per-channel softmax attention.
#[derive(Clone, Debug)]
pub struct SkBlock {
    pub channels: usize,
    pub branch_a: ConvBlock,
    pub branch_b: ConvBlock,
    pub fc_reduce: DenseLayer,
    pub fc_select_a: DenseLayer,
    pub fc_select_b: DenseLayer,
    pub reduction_ratio: usize,
    pub l_min: usize,
}

/// Intermediate values of an SK forward pass.
pub struct SkTrace {
    pub output: Var,
    pub branch_a: Var,
    pub branch_b: Var,
    /// `[N, C]` attention on branch a; branch b gets the complement.
    pub weight_a: Var,
    pub weight_b: Var,
}

impl SkBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction_ratio: usize,
        l_min: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if l_min < 8 {
            return Err(Error::Config {
                field: "l_min",
                detail: format!("must be >= 8, got {l_min}"),
            });
        }
        if reduction_ratio == 0 {
            return Err(Error::Config {
                field: "reduction_ratio",
                detail: "must be >= 1".into(),
            });
        }
        let hidden = reduced_width(channels, reduction_ratio, l_min);
        Ok(Self {
            channels,
            branch_a: ConvBlock::with_dilation(store, &format!("{name}.branch_a"), channels, channels, 1, rng),
            branch_b: ConvBlock::with_dilation(store, &format!("{name}.branch_b"), channels, channels, 2, rng),
            fc_reduce: DenseLayer::new(store, &format!("{name}.fc_reduce"), channels, hidden, rng),
            fc_select_a: DenseLayer::new(store, &format!("{name}.fc_select_a"), hidden, channels, rng),
            fc_select_b: DenseLayer::new(store, &format!("{name}.fc_select_b"), hidden, channels, rng),
            reduction_ratio,
            l_min,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, x)?.output)
    }

    pub fn forward_traced(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<SkTrace> {
        check_channels("sk", tape, x, self.channels)?;
        let ua = self.branch_a.forward(tape, p, x)?;
        let ub = self.branch_b.forward(tape, p, x)?;
        let fused = tape.add(ua, ub)?;
        let z = tape.global_avg_pool(fused)?;
        let z = self.fc_reduce.forward(tape, p, z)?;
        let z = tape.relu(z)?;
        let la = self.fc_select_a.forward(tape, p, z)?;
        let lb = self.fc_select_b.forward(tape, p, z)?;
        let n = tape.shape(x)[0];
        let c = self.channels;
        let la = tape.reshape(la, &[n, 1, c])?;
        let lb = tape.reshape(lb, &[n, 1, c])?;
        let logits = tape.concat(&[la, lb], 1)?;
        let attn = tape.softmax(logits, 1)?;
        let wa = tape.narrow(attn, 1, 0, 1)?;
        let wb = tape.narrow(attn, 1, 1, 1)?;
        let wa = tape.reshape(wa, &[n, c])?;
        let wb = tape.reshape(wb, &[n, c])?;
        let sa = tape.mul_channelwise(ua, wa)?;
        let sb = tape.mul_channelwise(ub, wb)?;
        Ok(SkTrace {
            output: tape.add(sa, sb)?,
            branch_a: ua,
            branch_b: ub,
            weight_a: wa,
            weight_b: wb,
        })
    }
}
