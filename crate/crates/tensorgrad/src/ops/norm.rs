//! Batch normalization, layer normalization and PReLU.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Var};
use crate::layer::NORM_EPS;
use crate::tensor::{Real, Tensor};

/// Selects batch statistics (train) or running statistics (eval).
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training batch. `var` is the unbiased
/// estimate, which is what running statistics track.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// Exponential update `running = (1 - m) running + m batch`.
    pub fn update_running(&self, momentum: T, mean: &mut [T], var: &mut [T]) {
        for (r, &b) in mean.iter_mut().zip(&self.mean) {
            *r = (T::one() - momentum) * *r + momentum * b;
        }
        for (r, &b) in var.iter_mut().zip(&self.var) {
            *r = (T::one() - momentum) * *r + momentum * b;
        }
    }
}

/// (batch, channels, plane) for channel-major `[B, C, ...]` / `[C, T, F]` tensors.
fn channel_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1] * shape[2])),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::Shape(format!("expected [B, C, T, F] or [C, T, F], got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let (batch, ch, plane) = channel_view(&shape)?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::Shape(format!(
                "batchnorm2d affine params must be [{ch}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::of(NORM_EPS);
        let count = batch * plane;
        let xd = self.value(x).data();
        let at = move |b: usize, c: usize| (b * ch + c) * plane;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if count == 0 {
                    return Err(Error::Shape("batchnorm2d on empty batch".into()));
                }
                let n = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s += xd[at(b, c)..][..plane].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut v = T::zero();
                    for b in 0..batch {
                        v += xd[at(b, c)..][..plane].iter().map(|&x| (x - m) * (x - m)).sum::<T>();
                    }
                    mean[c] = m;
                    var[c] = v / n;
                }
                let unbiased = if count > 1 {
                    let corr = n / (n - T::one());
                    var.iter().map(|&v| v * corr).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::Shape("batchnorm2d running stats length mismatch".into()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let train = stats.is_some();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let o = at(b, c);
                for i in o..o + plane {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gd[c] * h + bd[c];
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        let var = self.push(out, vec![x, gamma, beta], move |ctx: &Ctx<'_, T>, dy: &[T], needs: &[bool]| {
            let gd = ctx.input(1).data();
            let mut dgamma = vec![T::zero(); ch];
            let mut dbeta = vec![T::zero(); ch];
            for b in 0..batch {
                for c in 0..ch {
                    let o = at(b, c);
                    for i in o..o + plane {
                        dgamma[c] += dy[i] * xhat[i];
                        dbeta[c] += dy[i];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); dy.len()];
                let n = T::from_usize(count).unwrap();
                for c in 0..ch {
                    let k = gd[c] * inv_std[c];
                    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                    let (s1, s2) = (dbeta[c] / n, dgamma[c] / n);
                    for b in 0..batch {
                        let o = at(b, c);
                        for i in o..o + plane {
                            dx[i] = if train {
                                k * (dy[i] - s1 - xhat[i] * s2)
                            } else {
                                k * dy[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        });
        Ok((var, stats))
    }

    /// Normalizes over the last axis with eps 1e-5, then applies the affine map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layernorm of a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!("layernorm affine params must be [{d}]")));
        }
        let eps = T::of(NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..][..d];
            let m = row.iter().copied().sum::<T>() / dn;
            let v = row.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / dn;
            let is = T::one() / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - m) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, vec![x, gamma, beta], move |ctx: &Ctx<'_, T>, dy: &[T], needs: &[bool]| {
            let gd = ctx.input(1).data();
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = needs[0].then(|| vec![T::zero(); dy.len()]);
            let mut dxhat = vec![T::zero(); d];
            for r in 0..rows {
                let (dyr, xr) = (&dy[r * d..][..d], &xhat[r * d..][..d]);
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for j in 0..d {
                    dgamma[j] += dyr[j] * xr[j];
                    dbeta[j] += dyr[j];
                    dxhat[j] = dyr[j] * gd[j];
                    s1 += dxhat[j];
                    s2 += dxhat[j] * xr[j];
                }
                if let Some(dx) = dx.as_mut() {
                    let (s1, s2) = (s1 / dn, s2 / dn);
                    for j in 0..d {
                        dx[r * d + j] = inv_std[r] * (dxhat[j] - s1 - xr[j] * s2);
                    }
                }
            }
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        }))
    }

    /// `x` if `x >= 0`, else `slope[c] * x`, with one slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, ch, plane) = channel_view(&shape)?;
        if self.shape(slope) != [ch] {
            return Err(Error::Shape(format!("prelu slope must be [{ch}], got {:?}", self.shape(slope))));
        }
        let (xd, sd) = (self.value(x).data(), self.value(slope).data());
        let mut out = xd.to_vec();
        for b in 0..batch {
            for c in 0..ch {
                for v in &mut out[(b * ch + c) * plane..][..plane] {
                    if *v < T::zero() {
                        *v = *v * sd[c];
                    }
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, vec![x, slope], move |ctx: &Ctx<'_, T>, dy: &[T], needs: &[bool]| {
            let (xd, sd) = (ctx.input(0).data(), ctx.input(1).data());
            let mut dx = needs[0].then(|| vec![T::zero(); dy.len()]);
            let mut ds = vec![T::zero(); ch];
            for b in 0..batch {
                for c in 0..ch {
                    let o = (b * ch + c) * plane;
                    for i in o..o + plane {
                        let neg = xd[i] < T::zero();
                        if neg {
                            ds[c] += dy[i] * xd[i];
                        }
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = if neg { dy[i] * sd[c] } else { dy[i] };
                        }
                    }
                }
            }
            vec![dx, needs[1].then_some(ds)]
        }))
    }
}
