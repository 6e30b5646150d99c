//! Sub-batch normalization.
//!
//! Standard batch normalization lets a token's normalized value depend on
//! every other value in the batch, including its own future positions,
//! which breaks the autoregressive factorization the decoder relies on.
//! Here each training batch is split into a main part and an auxiliary
//! part: mean and variance come exclusively from the auxiliary rows, are
//! applied to every row, and the loss is later computed on main rows only.
//!
//! Running statistics are tracked per bucket id (padded length pair) as an
//! exponential moving average of the auxiliary statistics; the first update
//! copies them outright. Inference for a bucket that was never trained is a
//! hard error, never a silent fallback.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::data::bucket::BucketId;
use crate::error::{Error, Result};
use crate::kernels::{inv_std_s, norm_affine_s};
use crate::scalar::Scalar;
use crate::tape::{BackwardRule, Tape, TapeView, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub updates: u64,
}

/// Per-channel scale/shift plus per-bucket running statistics.
#[derive(Debug, Clone)]
pub struct SubBnParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: BTreeMap<BucketId, RunningStats<T>>,
}

/// Whether a forward pass computes statistics from auxiliary rows (training)
/// or reads stored per-bucket statistics (inference).
#[derive(Debug, Clone)]
pub enum BnMode {
    Train { aux_rows: Range<usize> },
    Infer,
}

/// Tape handles for gamma/beta.
#[derive(Debug, Clone, Copy)]
pub struct SubBnVars {
    pub gamma: Var,
    pub beta: Var,
}

impl<T: Scalar> SubBnParams<T> {
    pub fn init(channels: usize) -> Self {
        SubBnParams {
            gamma: Tensor::full(&[channels], T::one()).with_requires_grad(true),
            beta: Tensor::zeros(&[channels]).with_requires_grad(true),
            running: BTreeMap::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> SubBnVars {
        SubBnVars { gamma: tape.leaf(&self.gamma), beta: tape.leaf(&self.beta) }
    }

    /// Installs mean-0/var-1 statistics for a bucket. Lets an untrained
    /// model run in inference mode (gradient probes, rigged decoders).
    pub fn seed_identity(&mut self, bucket: BucketId) {
        let c = self.channels();
        self.running.insert(
            bucket,
            RunningStats { mean: vec![T::zero(); c], var: vec![T::one(); c], updates: 1 },
        );
    }

    fn update_running(&mut self, bucket: BucketId, mean: &[T], var: &[T], momentum: f64) {
        let c = self.channels();
        let entry = self.running.entry(bucket).or_insert_with(|| RunningStats {
            mean: vec![T::zero(); c],
            var: vec![T::zero(); c],
            updates: 0,
        });
        if entry.updates == 0 {
            entry.mean.copy_from_slice(mean);
            entry.var.copy_from_slice(var);
        } else {
            let m = T::from_f64_lossy(momentum);
            let keep = T::one() - m;
            for i in 0..c {
                entry.mean[i] = keep * entry.mean[i] + m * mean[i];
                entry.var[i] = keep * entry.var[i] + m * var[i];
            }
        }
        entry.updates += 1;
    }
}

/// Per-channel mean and biased variance (divide by N) over `rows` of a
/// `[batch, width, channels]` buffer. Two-pass for accuracy; iteration
/// order is fixed, so the result is deterministic.
pub fn batch_stats<T: Scalar>(
    x: &[T],
    rows: Range<usize>,
    width: usize,
    channels: usize,
) -> (Vec<T>, Vec<T>) {
    let n = rows.len() * width;
    debug_assert!(n > 0);
    let inv_n = T::one() / T::from(n).unwrap();
    let mut mean = vec![T::zero(); channels];
    for r in rows.clone() {
        for t in 0..width {
            let col = &x[(r * width + t) * channels..(r * width + t + 1) * channels];
            for (m, &v) in mean.iter_mut().zip(col) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut var = vec![T::zero(); channels];
    for r in rows {
        for t in 0..width {
            let col = &x[(r * width + t) * channels..(r * width + t + 1) * channels];
            for (vslot, (&v, &m)) in var.iter_mut().zip(col.iter().zip(&mean)) {
                let d = v - m;
                *vslot += d * d;
            }
        }
    }
    for v in &mut var {
        *v *= inv_n;
    }
    (mean, var)
}

fn normalize_into<T: Scalar>(
    x: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    channels: usize,
    out: &mut [T],
) {
    for (col_out, col_in) in out.chunks_mut(channels).zip(x.chunks(channels)) {
        for c in 0..channels {
            col_out[c] = norm_affine_s(col_in[c], mean[c], inv_std[c], gamma[c], beta[c]);
        }
    }
}

/// The operation in its standalone form: normalizes `main` rows. In
/// training mode the statistics come from `aux` (whose rows are drawn from
/// the same distribution) and the bucket's running statistics are updated;
/// in inference mode the stored statistics for `bucket` are used.
pub fn sub_batch_norm<T: Scalar>(
    params: &mut SubBnParams<T>,
    main: &Tensor<T>,
    aux: &Tensor<T>,
    training: bool,
    bucket: BucketId,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<T>> {
    let channels = params.channels();
    let check = |t: &Tensor<T>, name: &str| -> Result<(usize, usize)> {
        let s = t.shape();
        if s.len() != 3 || s[2] != channels {
            return Err(Error::Shape(format!(
                "sub_batch_norm: {} shape {:?} incompatible with {} channels",
                name, s, channels
            )));
        }
        Ok((s[0], s[1]))
    };
    let (_, width) = check(main, "main")?;
    let (mean, var) = if training {
        let (aux_rows, aux_width) = check(aux, "aux")?;
        if aux_rows == 0 || aux_width == 0 {
            return Err(Error::Contract("sub_batch_norm: training needs a non-empty auxiliary batch".into()));
        }
        let stats = batch_stats(aux.values(), 0..aux_rows, aux_width, channels);
        params.update_running(bucket, &stats.0, &stats.1, momentum);
        stats
    } else {
        let stats = params.running.get(&bucket).ok_or(Error::MissingStats {
            bucket,
            layer: "sub_batch_norm".into(),
        })?;
        (stats.mean.clone(), stats.var.clone())
    };
    let inv_std: Vec<T> =
        var.iter().map(|&v| inv_std_s(v, T::from_f64_lossy(eps))).collect();
    let mut out = vec![T::zero(); main.numel()];
    normalize_into(main.values(), &mean, &inv_std, params.gamma.values(), params.beta.values(), channels, &mut out);
    let _ = width;
    Tensor::from_vec(main.shape(), out)
}

/// Tape version over a combined `[main; aux]` batch: every row is
/// normalized (auxiliary rows must flow through the network so deeper
/// layers can compute their own auxiliary statistics), but the statistics
/// come from `aux_rows` only.
#[allow(clippy::too_many_arguments)]
pub fn sub_batch_norm_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: SubBnVars,
    params: &mut SubBnParams<T>,
    mode: &BnMode,
    bucket: BucketId,
    eps: f64,
    momentum: f64,
    layer: &str,
) -> Result<Var> {
    let channels = params.channels();
    let xshape = tape.shape(x).to_vec();
    if xshape.len() != 3 || xshape[2] != channels {
        return Err(Error::Shape(format!(
            "sub_batch_norm[{}]: input shape {:?} incompatible with {} channels",
            layer, xshape, channels
        )));
    }
    let (batch, width) = (xshape[0], xshape[1]);
    let eps_t = T::from_f64_lossy(eps);
    let (mean, var, aux_rows) = match mode {
        BnMode::Train { aux_rows } => {
            if aux_rows.start >= aux_rows.end || aux_rows.end > batch {
                return Err(Error::Contract(format!(
                    "sub_batch_norm[{}]: auxiliary rows {:?} invalid for batch {}",
                    layer, aux_rows, batch
                )));
            }
            if width == 0 {
                return Err(Error::Contract(format!("sub_batch_norm[{}]: zero width", layer)));
            }
            let (mean, var) = batch_stats(tape.values(x), aux_rows.clone(), width, channels);
            params.update_running(bucket, &mean, &var, momentum);
            (mean, var, aux_rows.clone())
        }
        BnMode::Infer => {
            let stats = params.running.get(&bucket).ok_or_else(|| Error::MissingStats {
                bucket,
                layer: layer.to_string(),
            })?;
            (stats.mean.clone(), stats.var.clone(), 0..0)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| inv_std_s(v, eps_t)).collect();
    let gv = tape.values(vars.gamma).to_vec();
    let bv = tape.values(vars.beta).to_vec();
    let mut out = vec![T::zero(); tape.numel(x)];
    normalize_into(tape.values(x), &mean, &inv_std, &gv, &bv, channels, &mut out);
    let rule: Box<dyn BackwardRule<T>> = match mode {
        BnMode::Train { .. } => Box::new(SubBnTrainRule {
            mean: mean.clone(),
            inv_std: inv_std.clone(),
            aux_rows,
            width,
            channels,
        }),
        BnMode::Infer => Box::new(SubBnAffineRule { mean: mean.clone(), inv_std: inv_std.clone(), channels }),
    };
    Ok(tape.custom(&[x, vars.gamma, vars.beta], out, xshape, rule))
}

/// Inference normalization of a single column, shared with the incremental
/// decoder. `inv_std` must come from [`inv_std_s`] over the stored variance.
#[inline]
pub(crate) fn norm_col_into<T: Scalar>(
    x: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
) {
    for c in 0..out.len() {
        out[c] = norm_affine_s(x[c], mean[c], inv_std[c], gamma[c], beta[c]);
    }
}

/// Training backward. With x-hat = (x - mean) * inv_std, N = |aux| elements
/// per channel, and g the output gradient:
///
///   dgamma[c] = sum_e g * x-hat          (all rows)
///   dbeta[c]  = sum_e g                  (all rows)
///   dx[e,c]   = gamma*inv_std * g[e,c]
///             - [e in aux] gamma*inv_std/N * (sum_g + x-hat[e,c] * sum_gx)
///
/// The aux-only correction term is what distinguishes this from textbook
/// batch norm: main rows influence neither mean nor variance.
struct SubBnTrainRule<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    aux_rows: Range<usize>,
    width: usize,
    channels: usize,
}

impl<T: Scalar> BackwardRule<T> for SubBnTrainRule<T> {
    fn backward(
        &self,
        grad_out: &[T],
        _output: TapeView<'_, T>,
        inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let c = self.channels;
        let xv = inputs[0].values;
        let gamma = inputs[1].values;
        let n_aux = T::from(self.aux_rows.len() * self.width).unwrap();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (flat, &g) in grad_out.iter().enumerate() {
            let ch = flat % c;
            let xhat = (xv[flat] - self.mean[ch]) * self.inv_std[ch];
            sum_g[ch] += g;
            sum_gx[ch] += g * xhat;
        }
        let (dx_slice, rest) = input_grads.split_at_mut(1);
        let (dgamma_slice, dbeta_slice) = rest.split_at_mut(1);
        let dx = &mut dx_slice[0];
        let dgamma = &mut dgamma_slice[0];
        let dbeta = &mut dbeta_slice[0];
        add_vec(dgamma, &sum_gx);
        add_vec(dbeta, &sum_g);
        let row_elems = self.width * c;
        for (flat, &g) in grad_out.iter().enumerate() {
            let ch = flat % c;
            let row = flat / row_elems;
            let scale = gamma[ch] * self.inv_std[ch];
            let mut d = scale * g;
            if self.aux_rows.contains(&row) {
                let xhat = (xv[flat] - self.mean[ch]) * self.inv_std[ch];
                d -= scale / n_aux * (sum_g[ch] + xhat * sum_gx[ch]);
            }
            dx[flat] += d;
        }
    }
}

/// Inference backward: stats are constants, so the op is a plain affine map.
struct SubBnAffineRule<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    channels: usize,
}

impl<T: Scalar> BackwardRule<T> for SubBnAffineRule<T> {
    fn backward(
        &self,
        grad_out: &[T],
        _output: TapeView<'_, T>,
        inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let c = self.channels;
        let xv = inputs[0].values;
        let gamma = inputs[1].values;
        let (dx_slice, rest) = input_grads.split_at_mut(1);
        let (dgamma_slice, dbeta_slice) = rest.split_at_mut(1);
        let dx = &mut dx_slice[0];
        let dgamma = &mut dgamma_slice[0];
        let dbeta = &mut dbeta_slice[0];
        for (flat, &g) in grad_out.iter().enumerate() {
            let ch = flat % c;
            dx[flat] += g * gamma[ch] * self.inv_std[ch];
            dgamma[ch] += g * (xv[flat] - self.mean[ch]) * self.inv_std[ch];
            dbeta[ch] += g;
        }
    }
}

fn add_vec<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bucket() -> BucketId {
        BucketId::new(4, 4)
    }

    #[test]
    fn hand_arithmetic_oracle() {
        // Aux holds channel values {1, 3}: mean 2, biased variance 1.
        // A main value of 4 normalizes to (4-2)/sqrt(1+1e-5).
        let mut p = SubBnParams::<f64>::init(1);
        let main = Tensor::from_vec(&[1, 1, 1], vec![4.0]).unwrap();
        let aux = Tensor::from_vec(&[2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = sub_batch_norm(&mut p, &main, &aux, true, bucket(), DEFAULT_EPS, DEFAULT_MOMENTUM)
            .unwrap();
        let expected = 2.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.values()[0] - expected).abs() < 1e-12, "{} vs {}", y.values()[0], expected);
        // First update copies the aux statistics outright.
        let stats = p.running.get(&bucket()).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn zero_mean_unit_variance_aux_is_nearly_identity() {
        let mut p = SubBnParams::<f64>::init(2);
        // Aux per channel: {-1, 1} -> mean 0, var 1.
        let aux =
            Tensor::from_vec(&[2, 1, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let main = Tensor::from_vec(&[1, 3, 2], vec![0.5, -2.0, 1.5, 0.0, 3.0, -0.25]).unwrap();
        let y = sub_batch_norm(&mut p, &main, &aux, true, bucket(), DEFAULT_EPS, DEFAULT_MOMENTUM)
            .unwrap();
        for (a, b) in y.values().iter().zip(main.values()) {
            assert!((a - b).abs() < 1e-4, "{} vs {}", a, b);
        }
    }

    #[test]
    fn main_rows_do_not_contaminate_statistics() {
        // Perturbing a future position of a main row must leave every other
        // output element bit-identical: statistics come from aux only.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let aux = Tensor::<f64>::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut rng);
        let base = Tensor::<f64>::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut rng);
        let mut perturbed = base.clone();
        // Change main row 0 at its last position, all channels.
        let off = perturbed.offset(&[0, 3, 0]);
        for c in 0..3 {
            perturbed.values_mut()[off + c] += 7.5;
        }
        let mut p1 = SubBnParams::<f64>::init(3);
        let mut p2 = SubBnParams::<f64>::init(3);
        let y1 = sub_batch_norm(&mut p1, &base, &aux, true, bucket(), DEFAULT_EPS, DEFAULT_MOMENTUM).unwrap();
        let y2 = sub_batch_norm(&mut p2, &perturbed, &aux, true, bucket(), DEFAULT_EPS, DEFAULT_MOMENTUM).unwrap();
        for flat in 0..y1.numel() {
            if flat >= off && flat < off + 3 {
                continue; // the perturbed elements themselves
            }
            assert_eq!(y1.values()[flat], y2.values()[flat], "leak at {}", flat);
        }
    }

    #[test]
    fn inference_without_stats_is_a_hard_error() {
        let mut p = SubBnParams::<f64>::init(2);
        let main = Tensor::zeros(&[1, 2, 2]);
        let aux = Tensor::zeros(&[1, 2, 2]);
        match sub_batch_norm(&mut p, &main, &aux, false, bucket(), DEFAULT_EPS, DEFAULT_MOMENTUM) {
            Err(Error::MissingStats { bucket: b, .. }) => assert_eq!(b, bucket()),
            other => panic!("expected MissingStats, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn running_stats_use_ema_after_first_copy() {
        let mut p = SubBnParams::<f64>::init(1);
        let main = Tensor::from_vec(&[1, 1, 1], vec![0.0]).unwrap();
        let aux1 = Tensor::from_vec(&[2, 1, 1], vec![1.0, 3.0]).unwrap(); // mean 2, var 1
        let aux2 = Tensor::from_vec(&[2, 1, 1], vec![4.0, 8.0]).unwrap(); // mean 6, var 4
        sub_batch_norm(&mut p, &main, &aux1, true, bucket(), DEFAULT_EPS, 0.1).unwrap();
        sub_batch_norm(&mut p, &main, &aux2, true, bucket(), DEFAULT_EPS, 0.1).unwrap();
        let stats = p.running.get(&bucket()).unwrap();
        assert!((stats.mean[0] - (0.9 * 2.0 + 0.1 * 6.0)).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 * 1.0 + 0.1 * 4.0)).abs() < 1e-12);
        assert_eq!(stats.updates, 2);
        // Separate buckets track separate statistics.
        let other = BucketId::new(8, 8);
        sub_batch_norm(&mut p, &main, &aux2, true, other, DEFAULT_EPS, 0.1).unwrap();
        assert_eq!(p.running.get(&other).unwrap().mean, vec![6.0]);
        assert!((p.running.get(&bucket()).unwrap().mean[0] - 2.4).abs() < 1e-12);
    }

    #[test]
    fn train_mode_gradients_match_finite_differences() {
        // Batch of 4 rows (2 main + 2 aux), width 3, 2 channels. The loss
        // weights every row, so gradients flow into aux rows both directly
        // and through the statistics.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = Tensor::<f64>::rand_uniform(&[4, 3, 2], -1.5, 1.5, &mut rng);
        let g0 = Tensor::<f64>::rand_uniform(&[2], 0.5, 1.5, &mut rng);
        let b0 = Tensor::<f64>::rand_uniform(&[2], -0.5, 0.5, &mut rng);
        let pick = Tensor::<f64>::rand_uniform(&[4, 3, 2], -1.0, 1.0, &mut rng);
        let mode = BnMode::Train { aux_rows: 2..4 };

        let eval = |xv: &[f64], gv: &[f64], bv: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let mut p = SubBnParams::<f64>::init(2);
            p.gamma = Tensor::from_vec(&[2], gv.to_vec()).unwrap();
            p.beta = Tensor::from_vec(&[2], bv.to_vec()).unwrap();
            let vars = SubBnVars {
                gamma: tape.constant(gv.to_vec(), &[2]).unwrap(),
                beta: tape.constant(bv.to_vec(), &[2]).unwrap(),
            };
            let x = tape.constant(xv.to_vec(), &[4, 3, 2]).unwrap();
            let y = sub_batch_norm_tape(&mut tape, x, vars, &mut p, &mode, bucket(), DEFAULT_EPS, DEFAULT_MOMENTUM, "t").unwrap();
            tape.values(y).iter().zip(pick.values()).map(|(a, b)| a * b).sum()
        };

        let mut tape = Tape::<f64>::new();
        let mut p = SubBnParams::<f64>::init(2);
        p.gamma = g0.clone().with_requires_grad(true);
        p.beta = b0.clone().with_requires_grad(true);
        let vars = p.bind(&mut tape);
        let x = tape.leaf(&x0.clone().with_requires_grad(true));
        let y = sub_batch_norm_tape(&mut tape, x, vars, &mut p, &mode, bucket(), DEFAULT_EPS, DEFAULT_MOMENTUM, "t").unwrap();
        let pk = tape.constant(pick.values().to_vec(), &[4, 3, 2]).unwrap();
        let prod = tape.mul(y, pk).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();

        let h = 1e-6;
        let gx = tape.grad(x).unwrap();
        for i in 0..x0.numel() {
            let mut hi = x0.values().to_vec();
            let mut lo = hi.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd = (eval(&hi, g0.values(), b0.values()) - eval(&lo, g0.values(), b0.values())) / (2.0 * h);
            assert!(
                (gx[i] - fd).abs() / (fd.abs() + 1e-8) < 1e-4,
                "x[{}]: autograd {} vs fd {}",
                i,
                gx[i],
                fd
            );
        }
        let gg = tape.grad(vars.gamma).unwrap();
        let gb = tape.grad(vars.beta).unwrap();
        for i in 0..2 {
            let mut hi = g0.values().to_vec();
            let mut lo = hi.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd = (eval(x0.values(), &hi, b0.values()) - eval(x0.values(), &lo, b0.values())) / (2.0 * h);
            assert!((gg[i] - fd).abs() / (fd.abs() + 1e-8) < 1e-4, "gamma[{}]", i);

            let mut hi = b0.values().to_vec();
            let mut lo = hi.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd = (eval(x0.values(), g0.values(), &hi) - eval(x0.values(), g0.values(), &lo)) / (2.0 * h);
            assert!((gb[i] - fd).abs() / (fd.abs() + 1e-8) < 1e-4, "beta[{}]", i);
        }
    }

    #[test]
    fn infer_mode_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x0 = Tensor::<f64>::rand_uniform(&[2, 3, 2], -1.0, 1.0, &mut rng);
        let pick = Tensor::<f64>::rand_uniform(&[2, 3, 2], -1.0, 1.0, &mut rng);
        let mut p = SubBnParams::<f64>::init(2);
        p.running.insert(
            bucket(),
            RunningStats { mean: vec![0.3, -0.2], var: vec![1.5, 0.7], updates: 1 },
        );
        let mut tape = Tape::<f64>::new();
        let vars = p.bind(&mut tape);
        let x = tape.leaf(&x0.clone().with_requires_grad(true));
        let y = sub_batch_norm_tape(&mut tape, x, vars, &mut p, &BnMode::Infer, bucket(), DEFAULT_EPS, DEFAULT_MOMENTUM, "t").unwrap();
        let pk = tape.constant(pick.values().to_vec(), &[2, 3, 2]).unwrap();
        let prod = tape.mul(y, pk).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let gx = tape.grad(x).unwrap();
        // Affine map: dx = g * gamma * inv_std, gamma = 1.
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |xv: &[f64]| -> f64 {
                let mut t2 = Tape::<f64>::new();
                let mut p2 = p.clone();
                let vars2 = SubBnVars {
                    gamma: t2.constant(p.gamma.values().to_vec(), &[2]).unwrap(),
                    beta: t2.constant(p.beta.values().to_vec(), &[2]).unwrap(),
                };
                let x2 = t2.constant(xv.to_vec(), &[2, 3, 2]).unwrap();
                let y2 = sub_batch_norm_tape(&mut t2, x2, vars2, &mut p2, &BnMode::Infer, bucket(), DEFAULT_EPS, DEFAULT_MOMENTUM, "t").unwrap();
                t2.values(y2).iter().zip(pick.values()).map(|(a, b)| a * b).sum()
            };
            let mut hi = x0.values().to_vec();
            let mut lo = hi.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            assert!((gx[i] - fd).abs() / (fd.abs() + 1e-8) < 1e-4, "x[{}]", i);
        }
    }
}
