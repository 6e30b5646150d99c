//! Residual blocks, the repeating unit of both networks.
//!
//! ReLU variant:
//!   SubBN -> ReLU -> 1x1 conv (2d -> d) -> SubBN -> ReLU ->
//!   dilated conv (d -> d) -> SubBN -> ReLU -> 1x1 conv (d -> 2d), + input.
//!
//! Multiplicative-unit variant:
//!   SubBN -> 1x1 conv (2d -> d) -> MU(d) -> dilated conv (d -> d) ->
//!   SubBN -> MU(d) -> 1x1 conv (d -> 2d), + input,
//! where MU(h) = g1 * tanh(g2 * h + g3 * u), u = tanh(W_u h), and each
//! gate g_i = sigmoid(W_i h); the four W are square 1x1 convolutions. The
//! channel reduction happens in the projection in front of the first MU,
//! so every MU is square.
//!
//! Zeroing all block parameters (gammas included) makes either block the
//! exact identity map.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::bucket::BucketId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::conv::{conv1d, Conv1dSpec, ConvParams, ConvVars};
use super::norm::{sub_batch_norm_tape, BnMode, SubBnParams, SubBnVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    Relu,
    Mu,
}

/// Geometry of one residual block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub variant: BlockVariant,
    /// Residual channel width (2d). Input and output width.
    pub outer: usize,
    /// Hidden width (d) between the reduce and expand convolutions.
    pub inner: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub masked: bool,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.outer != 2 * self.inner || self.inner == 0 {
            return Err(Error::Config(format!(
                "residual block: outer width {} must be twice the inner width {}",
                self.outer, self.inner
            )));
        }
        self.dilated().validate()
    }

    pub fn reduce(&self) -> Conv1dSpec {
        Conv1dSpec::pointwise(self.outer, self.inner)
    }

    pub fn dilated(&self) -> Conv1dSpec {
        Conv1dSpec {
            in_channels: self.inner,
            out_channels: self.inner,
            kernel_size: self.kernel,
            dilation: self.dilation,
            masked: self.masked,
        }
    }

    pub fn expand(&self) -> Conv1dSpec {
        Conv1dSpec::pointwise(self.inner, self.outer)
    }
}

/// Normalization context threaded through every block of a forward pass.
#[derive(Debug, Clone)]
pub struct NormCtx {
    pub mode: BnMode,
    pub bucket: BucketId,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct ReluBlockParams<T: Scalar> {
    pub bn_in: SubBnParams<T>,
    pub conv_reduce: ConvParams<T>,
    pub bn_mid: SubBnParams<T>,
    pub conv_dilated: ConvParams<T>,
    pub bn_out: SubBnParams<T>,
    pub conv_expand: ConvParams<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct ReluBlockVars {
    pub bn_in: SubBnVars,
    pub conv_reduce: ConvVars,
    pub bn_mid: SubBnVars,
    pub conv_dilated: ConvVars,
    pub bn_out: SubBnVars,
    pub conv_expand: ConvVars,
}

impl<T: Scalar> ReluBlockParams<T> {
    pub fn init(spec: &BlockSpec, rng: &mut impl Rng) -> Self {
        ReluBlockParams {
            bn_in: SubBnParams::init(spec.outer),
            conv_reduce: ConvParams::init(&spec.reduce(), rng),
            bn_mid: SubBnParams::init(spec.inner),
            conv_dilated: ConvParams::init(&spec.dilated(), rng),
            bn_out: SubBnParams::init(spec.inner),
            conv_expand: ConvParams::init(&spec.expand(), rng),
        }
    }

    /// All parameters zero, gammas included: the block becomes the exact
    /// identity map.
    pub fn zeros(spec: &BlockSpec) -> Self {
        let mut p = Self::init(spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        for (_, t) in collect_params_of(&mut p) {
            t.values_mut().fill(T::zero());
        }
        p
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ReluBlockVars {
        ReluBlockVars {
            bn_in: self.bn_in.bind(tape),
            conv_reduce: self.conv_reduce.bind(tape),
            bn_mid: self.bn_mid.bind(tape),
            conv_dilated: self.conv_dilated.bind(tape),
            bn_out: self.bn_out.bind(tape),
            conv_expand: self.conv_expand.bind(tape),
        }
    }
}

fn collect_params_of<T: Scalar>(
    p: &mut ReluBlockParams<T>,
) -> Vec<(String, &mut Tensor<T>)> {
    let mut out = Vec::new();
    p.visit_params("", &mut out);
    out
}

#[derive(Debug, Clone)]
pub struct MuParams<T: Scalar> {
    /// W_u, the update transform inside tanh.
    pub update: ConvParams<T>,
    /// g1: gates the final tanh output.
    pub gate_out: ConvParams<T>,
    /// g2: gates the hidden input h.
    pub gate_hidden: ConvParams<T>,
    /// g3: gates the update u.
    pub gate_update: ConvParams<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct MuVars {
    pub update: ConvVars,
    pub gate_out: ConvVars,
    pub gate_hidden: ConvVars,
    pub gate_update: ConvVars,
}

impl<T: Scalar> MuParams<T> {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let spec = Conv1dSpec::pointwise(channels, channels);
        MuParams {
            update: ConvParams::init(&spec, rng),
            gate_out: ConvParams::init(&spec, rng),
            gate_hidden: ConvParams::init(&spec, rng),
            gate_update: ConvParams::init(&spec, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> MuVars {
        MuVars {
            update: self.update.bind(tape),
            gate_out: self.gate_out.bind(tape),
            gate_hidden: self.gate_hidden.bind(tape),
            gate_update: self.gate_update.bind(tape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MuBlockParams<T: Scalar> {
    pub bn_in: SubBnParams<T>,
    pub conv_reduce: ConvParams<T>,
    pub mu_in: MuParams<T>,
    pub conv_dilated: ConvParams<T>,
    pub bn_mid: SubBnParams<T>,
    pub mu_out: MuParams<T>,
    pub conv_expand: ConvParams<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct MuBlockVars {
    pub bn_in: SubBnVars,
    pub conv_reduce: ConvVars,
    pub mu_in: MuVars,
    pub conv_dilated: ConvVars,
    pub bn_mid: SubBnVars,
    pub mu_out: MuVars,
    pub conv_expand: ConvVars,
}

impl<T: Scalar> MuBlockParams<T> {
    pub fn init(spec: &BlockSpec, rng: &mut impl Rng) -> Self {
        MuBlockParams {
            bn_in: SubBnParams::init(spec.outer),
            conv_reduce: ConvParams::init(&spec.reduce(), rng),
            mu_in: MuParams::init(spec.inner, rng),
            conv_dilated: ConvParams::init(&spec.dilated(), rng),
            bn_mid: SubBnParams::init(spec.inner),
            mu_out: MuParams::init(spec.inner, rng),
            conv_expand: ConvParams::init(&spec.expand(), rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> MuBlockVars {
        MuBlockVars {
            bn_in: self.bn_in.bind(tape),
            conv_reduce: self.conv_reduce.bind(tape),
            mu_in: self.mu_in.bind(tape),
            conv_dilated: self.conv_dilated.bind(tape),
            bn_mid: self.bn_mid.bind(tape),
            mu_out: self.mu_out.bind(tape),
            conv_expand: self.conv_expand.bind(tape),
        }
    }
}

/// One multiplicative unit on the tape, square over `channels`.
pub(crate) fn mu_unit<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    vars: &MuVars,
    channels: usize,
) -> Result<Var> {
    let spec = Conv1dSpec::pointwise(channels, channels);
    let u_pre = conv1d(tape, &spec, vars.update, h)?;
    let u = tape.tanh(u_pre);
    let g1_pre = conv1d(tape, &spec, vars.gate_out, h)?;
    let g1 = tape.sigmoid(g1_pre);
    let g2_pre = conv1d(tape, &spec, vars.gate_hidden, h)?;
    let g2 = tape.sigmoid(g2_pre);
    let g3_pre = conv1d(tape, &spec, vars.gate_update, h)?;
    let g3 = tape.sigmoid(g3_pre);
    let gh = tape.mul(g2, h)?;
    let gu = tape.mul(g3, u)?;
    let s = tape.add(gh, gu)?;
    let th = tape.tanh(s);
    tape.mul(g1, th)
}

pub fn relu_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &BlockSpec,
    vars: &ReluBlockVars,
    params: &mut ReluBlockParams<T>,
    ctx: &NormCtx,
    label: &str,
) -> Result<Var> {
    spec.validate()?;
    let bn = |tape: &mut Tape<T>, v, bnv, bnp: &mut SubBnParams<T>, sub: &str| {
        sub_batch_norm_tape(
            tape,
            v,
            bnv,
            bnp,
            &ctx.mode,
            ctx.bucket,
            ctx.eps,
            ctx.momentum,
            &format!("{}.{}", label, sub),
        )
    };
    let a = bn(tape, x, vars.bn_in, &mut params.bn_in, "bn_in")?;
    let a = tape.relu(a);
    let a = conv1d(tape, &spec.reduce(), vars.conv_reduce, a)?;
    let a = bn(tape, a, vars.bn_mid, &mut params.bn_mid, "bn_mid")?;
    let a = tape.relu(a);
    let a = conv1d(tape, &spec.dilated(), vars.conv_dilated, a)?;
    let a = bn(tape, a, vars.bn_out, &mut params.bn_out, "bn_out")?;
    let a = tape.relu(a);
    let a = conv1d(tape, &spec.expand(), vars.conv_expand, a)?;
    tape.add(x, a)
}

pub fn mu_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &BlockSpec,
    vars: &MuBlockVars,
    params: &mut MuBlockParams<T>,
    ctx: &NormCtx,
    label: &str,
) -> Result<Var> {
    spec.validate()?;
    let bn = |tape: &mut Tape<T>, v, bnv, bnp: &mut SubBnParams<T>, sub: &str| {
        sub_batch_norm_tape(
            tape,
            v,
            bnv,
            bnp,
            &ctx.mode,
            ctx.bucket,
            ctx.eps,
            ctx.momentum,
            &format!("{}.{}", label, sub),
        )
    };
    let a = bn(tape, x, vars.bn_in, &mut params.bn_in, "bn_in")?;
    let a = conv1d(tape, &spec.reduce(), vars.conv_reduce, a)?;
    let a = mu_unit(tape, a, &vars.mu_in, spec.inner)?;
    let a = conv1d(tape, &spec.dilated(), vars.conv_dilated, a)?;
    let a = bn(tape, a, vars.bn_mid, &mut params.bn_mid, "bn_mid")?;
    let a = mu_unit(tape, a, &vars.mu_out, spec.inner)?;
    let a = conv1d(tape, &spec.expand(), vars.conv_expand, a)?;
    tape.add(x, a)
}

// ---- parameter enumeration (optimizer, checkpoints) ----

impl<T: Scalar> ConvParams<T> {
    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{}weight", prefix), &mut self.weight));
        out.push((format!("{}bias", prefix), &mut self.bias));
    }

    pub fn visit_params_ref<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{}weight", prefix), &self.weight));
        out.push((format!("{}bias", prefix), &self.bias));
    }
}

impl<T: Scalar> SubBnParams<T> {
    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{}gamma", prefix), &mut self.gamma));
        out.push((format!("{}beta", prefix), &mut self.beta));
    }

    pub fn visit_params_ref<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{}gamma", prefix), &self.gamma));
        out.push((format!("{}beta", prefix), &self.beta));
    }
}

impl<T: Scalar> MuParams<T> {
    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.update.visit_params(&format!("{}update.", prefix), out);
        self.gate_out.visit_params(&format!("{}gate_out.", prefix), out);
        self.gate_hidden.visit_params(&format!("{}gate_hidden.", prefix), out);
        self.gate_update.visit_params(&format!("{}gate_update.", prefix), out);
    }

    pub fn visit_params_ref<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.update.visit_params_ref(&format!("{}update.", prefix), out);
        self.gate_out.visit_params_ref(&format!("{}gate_out.", prefix), out);
        self.gate_hidden.visit_params_ref(&format!("{}gate_hidden.", prefix), out);
        self.gate_update.visit_params_ref(&format!("{}gate_update.", prefix), out);
    }
}

impl<T: Scalar> ReluBlockParams<T> {
    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.bn_in.visit_params(&format!("{}bn_in.", prefix), out);
        self.conv_reduce.visit_params(&format!("{}conv_reduce.", prefix), out);
        self.bn_mid.visit_params(&format!("{}bn_mid.", prefix), out);
        self.conv_dilated.visit_params(&format!("{}conv_dilated.", prefix), out);
        self.bn_out.visit_params(&format!("{}bn_out.", prefix), out);
        self.conv_expand.visit_params(&format!("{}conv_expand.", prefix), out);
    }

    pub fn visit_params_ref<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.bn_in.visit_params_ref(&format!("{}bn_in.", prefix), out);
        self.conv_reduce.visit_params_ref(&format!("{}conv_reduce.", prefix), out);
        self.bn_mid.visit_params_ref(&format!("{}bn_mid.", prefix), out);
        self.conv_dilated.visit_params_ref(&format!("{}conv_dilated.", prefix), out);
        self.bn_out.visit_params_ref(&format!("{}bn_out.", prefix), out);
        self.conv_expand.visit_params_ref(&format!("{}conv_expand.", prefix), out);
    }

    pub fn visit_bn_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut SubBnParams<T>)) {
        f(format!("{}bn_in", prefix), &mut self.bn_in);
        f(format!("{}bn_mid", prefix), &mut self.bn_mid);
        f(format!("{}bn_out", prefix), &mut self.bn_out);
    }

    pub fn visit_bn(&self, prefix: &str, f: &mut dyn FnMut(String, &SubBnParams<T>)) {
        f(format!("{}bn_in", prefix), &self.bn_in);
        f(format!("{}bn_mid", prefix), &self.bn_mid);
        f(format!("{}bn_out", prefix), &self.bn_out);
    }
}

impl<T: Scalar> MuBlockParams<T> {
    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.bn_in.visit_params(&format!("{}bn_in.", prefix), out);
        self.conv_reduce.visit_params(&format!("{}conv_reduce.", prefix), out);
        self.mu_in.visit_params(&format!("{}mu_in.", prefix), out);
        self.conv_dilated.visit_params(&format!("{}conv_dilated.", prefix), out);
        self.bn_mid.visit_params(&format!("{}bn_mid.", prefix), out);
        self.mu_out.visit_params(&format!("{}mu_out.", prefix), out);
        self.conv_expand.visit_params(&format!("{}conv_expand.", prefix), out);
    }

    pub fn visit_params_ref<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.bn_in.visit_params_ref(&format!("{}bn_in.", prefix), out);
        self.conv_reduce.visit_params_ref(&format!("{}conv_reduce.", prefix), out);
        self.mu_in.visit_params_ref(&format!("{}mu_in.", prefix), out);
        self.conv_dilated.visit_params_ref(&format!("{}conv_dilated.", prefix), out);
        self.bn_mid.visit_params_ref(&format!("{}bn_mid.", prefix), out);
        self.mu_out.visit_params_ref(&format!("{}mu_out.", prefix), out);
        self.conv_expand.visit_params_ref(&format!("{}conv_expand.", prefix), out);
    }

    pub fn visit_bn_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut SubBnParams<T>)) {
        f(format!("{}bn_in", prefix), &mut self.bn_in);
        f(format!("{}bn_mid", prefix), &mut self.bn_mid);
    }

    pub fn visit_bn(&self, prefix: &str, f: &mut dyn FnMut(String, &SubBnParams<T>)) {
        f(format!("{}bn_in", prefix), &self.bn_in);
        f(format!("{}bn_mid", prefix), &self.bn_mid);
    }
}

/// Either block variant, as stored in a network's block list.
#[derive(Debug, Clone)]
pub enum AnyBlockParams<T: Scalar> {
    Relu(ReluBlockParams<T>),
    Mu(MuBlockParams<T>),
}

#[derive(Debug, Clone, Copy)]
pub enum AnyBlockVars {
    Relu(ReluBlockVars),
    Mu(MuBlockVars),
}

impl<T: Scalar> AnyBlockParams<T> {
    pub fn init(spec: &BlockSpec, rng: &mut impl Rng) -> Self {
        match spec.variant {
            BlockVariant::Relu => AnyBlockParams::Relu(ReluBlockParams::init(spec, rng)),
            BlockVariant::Mu => AnyBlockParams::Mu(MuBlockParams::init(spec, rng)),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> AnyBlockVars {
        match self {
            AnyBlockParams::Relu(p) => AnyBlockVars::Relu(p.bind(tape)),
            AnyBlockParams::Mu(p) => AnyBlockVars::Mu(p.bind(tape)),
        }
    }

    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        match self {
            AnyBlockParams::Relu(p) => p.visit_params(prefix, out),
            AnyBlockParams::Mu(p) => p.visit_params(prefix, out),
        }
    }

    pub fn visit_params_ref<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        match self {
            AnyBlockParams::Relu(p) => p.visit_params_ref(prefix, out),
            AnyBlockParams::Mu(p) => p.visit_params_ref(prefix, out),
        }
    }

    pub fn visit_bn_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut SubBnParams<T>)) {
        match self {
            AnyBlockParams::Relu(p) => p.visit_bn_mut(prefix, f),
            AnyBlockParams::Mu(p) => p.visit_bn_mut(prefix, f),
        }
    }

    pub fn visit_bn(&self, prefix: &str, f: &mut dyn FnMut(String, &SubBnParams<T>)) {
        match self {
            AnyBlockParams::Relu(p) => p.visit_bn(prefix, f),
            AnyBlockParams::Mu(p) => p.visit_bn(prefix, f),
        }
    }
}

/// Runs one block of either variant.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &BlockSpec,
    vars: &AnyBlockVars,
    params: &mut AnyBlockParams<T>,
    ctx: &NormCtx,
    label: &str,
) -> Result<Var> {
    match (vars, params) {
        (AnyBlockVars::Relu(v), AnyBlockParams::Relu(p)) => {
            relu_block(tape, x, spec, v, p, ctx, label)
        }
        (AnyBlockVars::Mu(v), AnyBlockParams::Mu(p)) => mu_block(tape, x, spec, v, p, ctx, label),
        _ => Err(Error::Contract("block vars/params variant mismatch".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn spec(variant: BlockVariant, masked: bool) -> BlockSpec {
        BlockSpec { variant, outer: 8, inner: 4, kernel: 3, dilation: 2, masked }
    }

    fn train_ctx() -> NormCtx {
        NormCtx {
            mode: BnMode::Train { aux_rows: 1..2 },
            bucket: BucketId::new(16, 16),
            eps: super::super::norm::DEFAULT_EPS,
            momentum: super::super::norm::DEFAULT_MOMENTUM,
        }
    }

    fn infer_ctx() -> NormCtx {
        NormCtx { mode: BnMode::Infer, ..train_ctx() }
    }

    fn seed_all<T: Scalar>(p: &mut AnyBlockParams<T>, bucket: BucketId) {
        p.visit_bn_mut("", &mut |_, bn| bn.seed_identity(bucket));
    }

    #[test]
    fn zeroed_relu_block_is_identity() {
        let s = spec(BlockVariant::Relu, true);
        let mut p = ReluBlockParams::<f64>::zeros(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::<f64>::rand_uniform(&[2, 5, 8], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.leaf(&x0);
        let ctx = train_ctx();
        let y = relu_block(&mut tape, x, &s, &vars, &mut p, &ctx, "b").unwrap();
        assert_eq!(tape.values(y), x0.values());
    }

    #[test]
    fn zeroed_mu_block_is_identity() {
        let s = spec(BlockVariant::Mu, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = MuBlockParams::<f64>::init(&s, &mut rng);
        {
            let mut collected = Vec::new();
            p.visit_params("", &mut collected);
            for (_, t) in collected {
                t.values_mut().fill(0.0);
            }
        }
        let x0 = Tensor::<f64>::rand_uniform(&[2, 5, 8], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.leaf(&x0);
        let ctx = train_ctx();
        let y = mu_block(&mut tape, x, &s, &vars, &mut p, &ctx, "b").unwrap();
        assert_eq!(tape.values(y), x0.values());
    }

    #[test]
    fn width_preserved_for_odd_widths() {
        let s = spec(BlockVariant::Relu, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = AnyBlockParams::<f64>::init(&s, &mut rng);
        let ctx = infer_ctx();
        seed_all(&mut p, ctx.bucket);
        for width in [1usize, 7, 100] {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let x = tape.constant(vec![0.25; width * 8], &[1, width, 8]).unwrap();
            let y = block_forward(&mut tape, x, &s, &vars, &mut p, &ctx, "b").unwrap();
            assert_eq!(tape.shape(y), &[1, width, 8]);
        }
    }

    #[test]
    fn masked_blocks_pass_no_gradient_to_the_future() {
        for variant in [BlockVariant::Relu, BlockVariant::Mu] {
            let s = spec(variant, true);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut p = AnyBlockParams::<f64>::init(&s, &mut rng);
            let ctx = infer_ctx();
            seed_all(&mut p, ctx.bucket);
            let width = 12;
            let x0 = Tensor::<f64>::rand_uniform(&[1, width, 8], -1.0, 1.0, &mut rng)
                .with_requires_grad(true);
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let x = tape.leaf(&x0);
            let y = block_forward(&mut tape, x, &s, &vars, &mut p, &ctx, "b").unwrap();
            let i = 5;
            let mask: Vec<f64> =
                (0..width * 8).map(|f| if f / 8 == i { 1.0 } else { 0.0 }).collect();
            let m = tape.constant(mask, &[1, width, 8]).unwrap();
            let picked = tape.mul(y, m).unwrap();
            let loss = tape.sum_all(picked);
            tape.backward(loss).unwrap();
            let gx = tape.grad(x).unwrap();
            for j in (i + 1)..width {
                for c in 0..8 {
                    assert_eq!(
                        gx[j * 8 + c],
                        0.0,
                        "{:?}: future gradient at j={} c={}",
                        variant,
                        j,
                        c
                    );
                }
            }
            // The block's own position must influence itself (residual path).
            assert!((0..8).any(|c| gx[i * 8 + c] != 0.0));
        }
    }

    #[test]
    fn saturated_gates_make_mu_block_nearly_identity() {
        let s = spec(BlockVariant::Mu, true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = MuBlockParams::<f64>::init(&s, &mut rng);
        // Drive g1 of both MUs to sigmoid(-40) ~ 0: F collapses to ~0.
        p.mu_in.gate_out.weight.values_mut().fill(0.0);
        p.mu_in.gate_out.bias.values_mut().fill(-40.0);
        p.mu_out.gate_out.weight.values_mut().fill(0.0);
        p.mu_out.gate_out.bias.values_mut().fill(-40.0);
        let mut any = AnyBlockParams::Mu(p);
        let ctx = infer_ctx();
        seed_all(&mut any, ctx.bucket);
        let AnyBlockParams::Mu(mut p) = any else { unreachable!() };
        let x0 = Tensor::<f64>::rand_uniform(&[1, 6, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.leaf(&x0);
        let y = mu_block(&mut tape, x, &s, &vars, &mut p, &ctx, "b").unwrap();
        for (a, b) in tape.values(y).iter().zip(x0.values()) {
            assert!((a - b).abs() < 1e-3, "{} vs {}", a, b);
        }
    }
}
