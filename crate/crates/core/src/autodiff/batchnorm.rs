//! Batch normalization with optionally synchronized batch statistics.
//!
//! Per-channel sums are formed per sample in a fixed order and combined across
//! samples (and workers) exactly, so a synchronized layer produces the same
//! bits whether the global batch lives on one worker or is split over many.

use crate::autodiff::graph::{BatchReducer, Mode, NodeId};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exact::ExactVec;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel affine parameters and running statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: f64,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], S::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug)]
pub(crate) struct BnCache {
    pub input: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
    mode: Mode,
    sync: bool,
    mean: Vec<f64>,
    invstd: Vec<f64>,
    gamma_vals: Vec<f64>,
    count: f64,
    dims: (usize, usize, usize, usize),
}

pub(crate) struct BnGrads<S> {
    pub batch: usize,
    pub dinput: Vec<S>,
    pub per_sample_gamma: Vec<f64>,
    pub per_sample_beta: Vec<f64>,
}

fn inverse_std(var: &[f64]) -> Vec<f64> {
    var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()
}

/// `gamma * (x - mean) * invstd + beta` per channel of `[B,C,plane]` data.
fn normalize_in_place<S: Scalar>(
    xs: &mut [S],
    c: usize,
    plane: usize,
    mean: &[f64],
    invstd: &[f64],
    gamma: &[f64],
    beta: &[f64],
) {
    for (k, chunk) in xs.chunks_exact_mut(plane).enumerate() {
        let ci = k % c;
        let (m, is, g, bt) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
        for v in chunk {
            *v = S::from_f64(g * ((v.as_f64() - m) * is) + bt);
        }
    }
}

/// Eval-mode normalization of `[B,C,H,W]` data with the layer's running
/// statistics and the given affine parameters, without recording anything.
pub(crate) fn eval_in_place<S: Scalar>(
    xs: &mut [S],
    c: usize,
    plane: usize,
    gamma: &[S],
    beta: &[S],
    state: &BatchNormState<S>,
) -> Result<()> {
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::shape("batchnorm", format!("expected {c} channels")));
    }
    let mean: Vec<f64> = state.running_mean.iter().map(|v| v.as_f64()).collect();
    let var: Vec<f64> = state.running_var.iter().map(|v| v.as_f64()).collect();
    let g: Vec<f64> = gamma.iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = beta.iter().map(|v| v.as_f64()).collect();
    normalize_in_place(xs, c, plane, &mean, &inverse_std(&var), &g, &b);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    state: &mut BatchNormState<S>,
    mode: Mode,
    sync: bool,
    reducer: &mut dyn BatchReducer,
    input_id: NodeId,
    gamma_id: NodeId,
    beta_id: NodeId,
) -> Result<(Tensor<S>, BnCache)> {
    let (b, c, h, w) = x.dims4("batchnorm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!("gamma/beta must have length {c} (channels)"),
        ));
    }
    if state.channels() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("running statistics hold {} channels, input has {c}", state.channels()),
        ));
    }
    let plane = h * w;
    let xs = x.data();

    let (mean, var, count) = match mode {
        Mode::Train => {
            let mut first = ExactVec::zeros(c + 1);
            let mut partial = vec![0.0f64; c];
            for s in 0..b {
                for (ci, p) in partial.iter_mut().enumerate() {
                    let base = (s * c + ci) * plane;
                    *p = xs[base..base + plane].iter().fold(0.0, |a, v| a + v.as_f64());
                }
                first.add_slice(0, partial.iter().copied());
            }
            first.add_at(c, (b * plane) as f64);
            reducer.reduce(&mut first)?;
            let count = first.value(c);
            if count < 2.0 * plane as f64 {
                return Err(Error::InvalidArgument(format!(
                    "batchnorm in train mode needs a batch of at least 2 samples, got {}",
                    count / plane as f64
                )));
            }
            let mean: Vec<f64> = (0..c).map(|ci| first.value(ci) / count).collect();

            let mut second = ExactVec::zeros(c);
            for s in 0..b {
                for (ci, p) in partial.iter_mut().enumerate() {
                    let base = (s * c + ci) * plane;
                    let m = mean[ci];
                    *p = xs[base..base + plane].iter().fold(0.0, |a, v| {
                        let d = v.as_f64() - m;
                        a + d * d
                    });
                }
                second.add_slice(0, partial.iter().copied());
            }
            reducer.reduce(&mut second)?;
            let var: Vec<f64> = (0..c).map(|ci| second.value(ci) / count).collect();

            let mom = state.momentum;
            let unbias = count / (count - 1.0);
            for ci in 0..c {
                let rm = state.running_mean[ci].as_f64();
                let rv = state.running_var[ci].as_f64();
                state.running_mean[ci] = S::from_f64((1.0 - mom) * rm + mom * mean[ci]);
                state.running_var[ci] = S::from_f64((1.0 - mom) * rv + mom * var[ci] * unbias);
            }
            (mean, var, count)
        }
        Mode::Eval => (
            state.running_mean.iter().map(|v| v.as_f64()).collect(),
            state.running_var.iter().map(|v| v.as_f64()).collect(),
            (b * plane) as f64,
        ),
    };

    let invstd = inverse_std(&var);
    let gamma_vals: Vec<f64> = gamma.data().iter().map(|v| v.as_f64()).collect();
    let beta_vals: Vec<f64> = beta.data().iter().map(|v| v.as_f64()).collect();
    let mut out = xs.to_vec();
    normalize_in_place(&mut out, c, plane, &mean, &invstd, &gamma_vals, &beta_vals);
    let cache = BnCache {
        input: input_id,
        gamma: gamma_id,
        beta: beta_id,
        mode,
        sync,
        mean,
        invstd,
        gamma_vals,
        count,
        dims: (b, c, h, w),
    };
    Ok((Tensor::new(vec![b, c, h, w], out)?, cache))
}

pub(crate) fn backward<S: Scalar>(
    cache: &BnCache,
    x: &Tensor<S>,
    g: &Tensor<S>,
    reducer: &mut dyn BatchReducer,
) -> Result<BnGrads<S>> {
    let (b, c, h, w) = cache.dims;
    let plane = h * w;
    let dy = g.data();
    let xs = x.data();
    let mut per_gamma = vec![0.0f64; b * c];
    let mut per_beta = vec![0.0f64; b * c];
    for s in 0..b {
        for ci in 0..c {
            let base = (s * c + ci) * plane;
            let (m, is) = (cache.mean[ci], cache.invstd[ci]);
            let mut sdy = 0.0;
            let mut sdyx = 0.0;
            for (v, d) in xs[base..base + plane].iter().zip(&dy[base..base + plane]) {
                let (v, d) = (v.as_f64(), d.as_f64());
                sdy += d;
                sdyx += d * ((v - m) * is);
            }
            per_gamma[s * c + ci] = sdyx;
            per_beta[s * c + ci] = sdy;
        }
    }

    let mut dinput = Vec::with_capacity(xs.len());
    match cache.mode {
        Mode::Train => {
            let mut sums = ExactVec::zeros(2 * c);
            for s in 0..b {
                sums.add_slice(0, per_beta[s * c..(s + 1) * c].iter().copied());
                sums.add_slice(c, per_gamma[s * c..(s + 1) * c].iter().copied());
            }
            if cache.sync {
                reducer.reduce(&mut sums)?;
            }
            let n = cache.count;
            let mean_dy: Vec<f64> = (0..c).map(|ci| sums.value(ci) / n).collect();
            let mean_dyx: Vec<f64> = (0..c).map(|ci| sums.value(c + ci) / n).collect();
            for s in 0..b {
                for ci in 0..c {
                    let base = (s * c + ci) * plane;
                    let (m, is) = (cache.mean[ci], cache.invstd[ci]);
                    let (mean_dy, mean_dyx) = (mean_dy[ci], mean_dyx[ci]);
                    let k = cache.gamma_vals[ci] * is;
                    dinput.extend(xs[base..base + plane].iter().zip(&dy[base..base + plane]).map(
                        |(v, d)| {
                            let xhat = (v.as_f64() - m) * is;
                            S::from_f64(k * (d.as_f64() - mean_dy - xhat * mean_dyx))
                        },
                    ));
                }
            }
        }
        Mode::Eval => {
            for s in 0..b {
                for ci in 0..c {
                    let base = (s * c + ci) * plane;
                    let k = cache.gamma_vals[ci] * cache.invstd[ci];
                    dinput.extend(dy[base..base + plane].iter().map(|d| S::from_f64(k * d.as_f64())));
                }
            }
        }
    }
    Ok(BnGrads {
        batch: b,
        dinput,
        per_sample_gamma: per_gamma,
        per_sample_beta: per_beta,
    })
}
