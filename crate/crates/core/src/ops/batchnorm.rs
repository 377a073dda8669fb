use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization over every axis except axis 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// `None` until the first training-mode pass (or an explicit
    /// [`reset_running_stats`](Self::reset_running_stats)).
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
    pub epsilon: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNormParams<T> {
    /// `gamma = 1`, `beta = 0`, no running statistics yet.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: None,
            running_var: None,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Set running mean 0 and variance 1.
    pub fn reset_running_stats(&mut self) {
        let c = self.channels();
        self.running_mean = Some(Tensor::zeros(vec![c]));
        self.running_var = Some(Tensor::ones(vec![c]));
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        if x.rank() < 2 || x.shape()[1] != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        Ok((n, c, x.len() / (n * c)))
    }
}

/// Visit `(channel, slice)` pairs of an `(N, C, ...)` buffer.
fn channel_slices<T>(data: &[T], c: usize, inner: usize) -> impl Iterator<Item = (usize, &[T])> {
    data.chunks(inner).enumerate().map(move |(k, s)| (k % c, s))
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    mean: &[T],
    inv_std: &[T],
    mode: Mode,
) -> (Tensor<T>, BnCache<T>) {
    let c = p.channels();
    let inner = x.len() / (x.shape()[0] * c);
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for (k, (xh, yy)) in x_hat
        .data_mut()
        .chunks_mut(inner)
        .zip(y.data_mut().chunks_mut(inner))
        .enumerate()
    {
        let ch = k % c;
        let (g, b) = (p.gamma.data()[ch], p.beta.data()[ch]);
        for (a, o) in xh.iter_mut().zip(yy.iter_mut()) {
            *a = (*a - mean[ch]) * inv_std[ch];
            *o = g * *a + b;
        }
    }
    (
        y,
        BnCache {
            x_hat,
            inv_std: inv_std.to_vec(),
            mode,
        },
    )
}

/// Eval-mode normalization with the running statistics; read-only on `p`.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    p.check(x)?;
    let (Some(mean), Some(var)) = (&p.running_mean, &p.running_var) else {
        return Err(Error::Model(
            "batch norm evaluated before any running statistics exist".into(),
        ));
    };
    let eps = T::from_f64(p.epsilon);
    let inv_std: Vec<T> = var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    Ok(normalize(x, p, mean.data(), &inv_std, Mode::Eval))
}

/// `y = gamma * (x - mu) / sqrt(var + eps) + beta`. Training mode uses batch
/// statistics and folds them into the running estimates.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    if mode == Mode::Eval {
        return batchnorm_eval(x, p);
    }
    let (_, c, inner) = p.check(x)?;
    let count = x.len() / c;
    if count < 2 {
        return Err(Error::shape(format!(
            "training-mode batch norm needs at least 2 values per channel, input {:?}",
            x.shape()
        )));
    }
    let mut sum = vec![0.0f64; c];
    for (ch, s) in channel_slices(x.data(), c, inner) {
        sum[ch] += s.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; c];
    for (ch, s) in channel_slices(x.data(), c, inner) {
        sq[ch] += s
            .iter()
            .map(|v| (v.as_f64() - mean[ch]).powi(2))
            .sum::<f64>();
    }
    let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::from_f64(1.0 / (v + p.epsilon).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();

    if p.running_mean.is_none() || p.running_var.is_none() {
        p.reset_running_stats();
    }
    let m = p.momentum;
    let unbiased = count as f64 / (count - 1) as f64;
    if let (Some(rm), Some(rv)) = (p.running_mean.as_mut(), p.running_var.as_mut()) {
        for ch in 0..c {
            let old_m = rm.data()[ch].as_f64();
            let old_v = rv.data()[ch].as_f64();
            rm.data_mut()[ch] = T::from_f64((1.0 - m) * old_m + m * mean[ch]);
            rv.data_mut()[ch] = T::from_f64((1.0 - m) * old_v + m * var[ch] * unbiased);
        }
    }
    Ok(normalize(x, p, &mean_t, &inv_std, Mode::Train))
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    p: &BatchNormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    grad_out.expect_shape(cache.x_hat.shape())?;
    let (_, c, inner) = p.check(grad_out)?;
    let count = grad_out.len() / c;

    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for ((ch, g), (_, xh)) in
        channel_slices(grad_out.data(), c, inner).zip(channel_slices(cache.x_hat.data(), c, inner))
    {
        for (&gv, &xv) in g.iter().zip(xh) {
            sum_g[ch] = sum_g[ch] + gv;
            sum_gx[ch] = sum_gx[ch] + gv * xv;
        }
    }

    let mut dx = grad_out.clone();
    let n = T::from_usize(count);
    for (k, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
        let ch = k % c;
        let scale = p.gamma.data()[ch] * cache.inv_std[ch];
        let xh = &cache.x_hat.data()[k * inner..(k + 1) * inner];
        match cache.mode {
            Mode::Eval => chunk.iter_mut().for_each(|g| *g = *g * scale),
            Mode::Train => {
                for (g, &x) in chunk.iter_mut().zip(xh) {
                    *g = scale * (*g - sum_g[ch] / n - x * sum_gx[ch] / n);
                }
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: Tensor::new(vec![c], sum_gx)?,
        beta: Tensor::new(vec![c], sum_g)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_moments(y: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let c = y.shape()[1];
        let inner = y.len() / (y.shape()[0] * c);
        let vals: Vec<f64> = channel_slices(y.data(), c, inner)
            .filter(|(k, _)| *k == ch)
            .flat_map(|(_, s)| s.to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    fn sample() -> Tensor<f64> {
        Tensor::from_fn(vec![3, 2, 2, 3], |i| {
            ((i[0] * 7 + i[1] * 3 + i[2] * 5 + i[3]) as f64 * 0.731).sin() * 4.0 + i[1] as f64
        })
    }

    #[test]
    fn train_mode_standardizes() {
        let mut p = BatchNormParams::new(2);
        let (y, _) = batchnorm_forward(&sample(), &mut p, Mode::Train).unwrap();
        for ch in 0..2 {
            let (m, v) = channel_moments(&y, ch);
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn affine_parameters_apply() {
        let mut p = BatchNormParams::new(2);
        p.gamma = Tensor::full(vec![2], 2.0);
        p.beta = Tensor::full(vec![2], 3.0);
        let (y, _) = batchnorm_forward(&sample(), &mut p, Mode::Train).unwrap();
        let (m, v) = channel_moments(&y, 1);
        assert!((m - 3.0).abs() < 1e-12);
        assert!((v.sqrt() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut p = BatchNormParams::<f64>::new(2);
        let (y, _) = batchnorm_forward(&Tensor::zeros(vec![2, 2, 3]), &mut p, Mode::Train).unwrap();
        assert_eq!(y.max_abs(), 0.0);
        let (y, _) = batchnorm_forward(&Tensor::zeros(vec![2, 2, 3]), &mut p, Mode::Eval).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn eval_requires_running_stats() {
        let mut p = BatchNormParams::<f32>::new(2);
        assert!(matches!(
            batchnorm_forward(&Tensor::zeros(vec![2, 2, 3]), &mut p, Mode::Eval),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = BatchNormParams::<f64>::new(1);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        let rm = p.running_mean.as_ref().unwrap().data()[0];
        let rv = p.running_var.as_ref().unwrap().data()[0];
        assert!((rm - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(rv >= 0.0);
    }
}
