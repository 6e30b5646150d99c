//! Dilated 1-D convolutions over `[batch, width, channels]` tensors.
//!
//! Masked mode reads taps at offsets `{0, -d, ..., -(k-1)d}` relative to the
//! output position, so position t never sees positions after t. Unmasked
//! mode is centered (odd k). Out-of-range taps read zero, so width is
//! preserved exactly. Masking is implemented by enumerating taps directly
//! rather than zeroing half of a width-(2k-1) kernel; the two forms are
//! equivalent and that equivalence is pinned by a test below.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{axpy, dot};
use crate::scalar::Scalar;
use crate::tape::{BackwardRule, Tape, TapeView, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub masked: bool,
}

impl Conv1dSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        masked: bool,
    ) -> Result<Self> {
        let spec = Conv1dSpec { in_channels, out_channels, kernel_size, dilation, masked };
        spec.validate()?;
        Ok(spec)
    }

    /// 1x1 convolution, the channel-mixing layer inside residual blocks.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Conv1dSpec { in_channels, out_channels, kernel_size: 1, dilation: 1, masked: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("conv1d: zero channel count".into()));
        }
        if self.kernel_size == 0 || self.dilation == 0 {
            return Err(Error::Config("conv1d: kernel size and dilation must be >= 1".into()));
        }
        if !self.masked && self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d: unmasked (centered) convolution needs odd kernel size, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Position offset of tap `i` (0 <= i < k). Masked: `(i - (k-1)) * d`,
    /// i.e. the last tap sits on the output position. Unmasked: centered.
    #[inline]
    pub fn offset(&self, i: usize) -> isize {
        let k = self.kernel_size as isize;
        let d = self.dilation as isize;
        if self.masked {
            (i as isize - (k - 1)) * d
        } else {
            (i as isize - (k - 1) / 2) * d
        }
    }

    /// Number of weight elements: `out * k * in`.
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.kernel_size * self.in_channels
    }
}

/// One output column of a convolution. Shared verbatim between the batched
/// tape forward pass and the incremental decoder: bit-identical generation
/// depends on both paths running exactly this function.
///
/// `col_at` resolves a (possibly out-of-range) position to its input column
/// of `in_channels` values, or None for zero padding.
#[inline]
pub(crate) fn conv_col_into<'a, T: Scalar + 'a>(
    spec: &Conv1dSpec,
    weight: &[T],
    bias: &[T],
    col_at: impl Fn(isize) -> Option<&'a [T]>,
    t: usize,
    out: &mut [T],
) {
    let k = spec.kernel_size;
    let cin = spec.in_channels;
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = bias[o];
        for i in 0..k {
            if let Some(col) = col_at(t as isize + spec.offset(i)) {
                acc = acc + dot(&weight[(o * k + i) * cin..(o * k + i + 1) * cin], col);
            }
        }
        *slot = acc;
    }
}

/// Weight `[out, k, in]` and bias `[out]` for one convolution.
#[derive(Debug, Clone)]
pub struct ConvParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    /// Uniform weights scaled by 1/sqrt(fan-in), zero bias.
    pub fn init(spec: &Conv1dSpec, rng: &mut impl Rng) -> Self {
        let fan_in = (spec.kernel_size * spec.in_channels) as f64;
        let scale = 1.0 / fan_in.sqrt();
        let weight = Tensor::rand_uniform(
            &[spec.out_channels, spec.kernel_size, spec.in_channels],
            -scale,
            scale,
            rng,
        )
        .with_requires_grad(true);
        let bias = Tensor::zeros(&[spec.out_channels]).with_requires_grad(true);
        ConvParams { weight, bias }
    }

    pub fn zeros(spec: &Conv1dSpec) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[spec.out_channels, spec.kernel_size, spec.in_channels])
                .with_requires_grad(true),
            bias: Tensor::zeros(&[spec.out_channels]).with_requires_grad(true),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ConvVars {
        ConvVars { weight: tape.leaf(&self.weight), bias: tape.leaf(&self.bias) }
    }
}

/// Tape handles for one convolution's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Batched convolution on the tape: `[batch, width, in] -> [batch, width, out]`.
pub fn conv1d<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &Conv1dSpec,
    vars: ConvVars,
    input: Var,
) -> Result<Var> {
    spec.validate()?;
    let wshape = tape.shape(vars.weight).to_vec();
    let expected = [spec.out_channels, spec.kernel_size, spec.in_channels];
    if wshape != expected {
        return Err(Error::Shape(format!(
            "conv1d: weight shape {:?} does not match spec {:?}",
            wshape, expected
        )));
    }
    if tape.shape(vars.bias) != [spec.out_channels] {
        return Err(Error::Shape(format!(
            "conv1d: bias shape {:?}, expected [{}]",
            tape.shape(vars.bias),
            spec.out_channels
        )));
    }
    let xshape = tape.shape(input).to_vec();
    if xshape.len() != 3 || xshape[2] != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv1d: input shape {:?} incompatible with {} input channels",
            xshape, spec.in_channels
        )));
    }
    let (batch, width, cin) = (xshape[0], xshape[1], xshape[2]);
    let cout = spec.out_channels;
    let wv = tape.values(vars.weight).to_vec();
    let bv = tape.values(vars.bias).to_vec();
    let xv = tape.values(input);
    let mut out = vec![T::zero(); batch * width * cout];
    for b in 0..batch {
        let sample = &xv[b * width * cin..(b + 1) * width * cin];
        for t in 0..width {
            let col_at = |src: isize| -> Option<&[T]> {
                if src < 0 || src >= width as isize {
                    None
                } else {
                    let s = src as usize;
                    Some(&sample[s * cin..(s + 1) * cin])
                }
            };
            conv_col_into(
                spec,
                &wv,
                &bv,
                col_at,
                t,
                &mut out[(b * width + t) * cout..(b * width + t + 1) * cout],
            );
        }
    }
    Ok(tape.custom(
        &[vars.weight, vars.bias, input],
        out,
        vec![batch, width, cout],
        Box::new(ConvRule { spec: spec.clone(), batch, width }),
    ))
}

struct ConvRule {
    spec: Conv1dSpec,
    batch: usize,
    width: usize,
}

impl<T: Scalar> BackwardRule<T> for ConvRule {
    fn backward(
        &self,
        grad_out: &[T],
        _output: TapeView<'_, T>,
        inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let (k, cin, cout) = (self.spec.kernel_size, self.spec.in_channels, self.spec.out_channels);
        let width = self.width;
        let wv = inputs[0].values;
        let xv = inputs[2].values;
        let (dw_slice, rest) = input_grads.split_at_mut(1);
        let (db_slice, dx_slice) = rest.split_at_mut(1);
        let dw = &mut dw_slice[0];
        let db = &mut db_slice[0];
        let dx = &mut dx_slice[0];
        for b in 0..self.batch {
            for t in 0..width {
                let gcol = &grad_out[(b * width + t) * cout..(b * width + t + 1) * cout];
                for (o, &go) in gcol.iter().enumerate() {
                    if go == T::zero() {
                        continue;
                    }
                    db[o] += go;
                    for i in 0..k {
                        let src = t as isize + self.spec.offset(i);
                        if src < 0 || src >= width as isize {
                            continue;
                        }
                        let s = (b * width + src as usize) * cin;
                        let w0 = (o * k + i) * cin;
                        axpy(&mut dw[w0..w0 + cin], go, &xv[s..s + cin]);
                        axpy(&mut dx[s..s + cin], go, &wv[w0..w0 + cin]);
                    }
                }
            }
        }
    }
}
