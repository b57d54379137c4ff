//! Complex arithmetic on tensors whose leading axis of length 2 holds the
//! real and imaginary parts.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Var};
use crate::tensor::{Real, Tensor};

fn complex_half<T: Real>(g: &Graph<T>, v: Var) -> Result<usize> {
    let s = g.shape(v);
    if s.first() != Some(&2) {
        return Err(Error::Shape(format!("complex tensor needs leading axis 2, got {s:?}")));
    }
    Ok(g.value(v).numel() / 2)
}

impl<T: Real> Graph<T> {
    /// Elementwise `(a + ib)(c + id)`.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = complex_half(self, a)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("complex_mul: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); 2 * n];
        for i in 0..n {
            let (ar, ai, br, bi) = (x[i], x[n + i], y[i], y[n + i]);
            out[i] = ar * br - ai * bi;
            out[n + i] = ar * bi + ai * br;
        }
        let out = Tensor::new(self.shape(a), out)?;
        Ok(self.push(out, vec![a, b], move |ctx: &Ctx<'_, T>, g: &[T], needs: &[bool]| {
            let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
            // d/da = g * conj(b), d/db = g * conj(a)
            let conj_prod = |u: &[T]| {
                let mut d = vec![T::zero(); 2 * n];
                for i in 0..n {
                    let (gr, gi, ur, ui) = (g[i], g[n + i], u[i], u[n + i]);
                    d[i] = gr * ur + gi * ui;
                    d[n + i] = gi * ur - gr * ui;
                }
                d
            };
            vec![needs[0].then(|| conj_prod(y)), needs[1].then(|| conj_prod(x))]
        }))
    }

    /// Magnitude `sqrt(re^2 + im^2)`, dropping the leading axis. The
    /// gradient at a zero bin is defined as zero.
    pub fn complex_abs(&mut self, x: Var) -> Result<Var> {
        let n = complex_half(self, x)?;
        let d = self.value(x).data();
        let mag: Vec<T> = (0..n).map(|i| d[i].hypot(d[n + i])).collect();
        let out = Tensor::new(&self.shape(x)[1..], mag)?;
        Ok(self.push(out, vec![x], move |ctx: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            let (d, m) = (ctx.input(0).data(), ctx.output().data());
            let mut dx = vec![T::zero(); 2 * n];
            for i in 0..n {
                if m[i] > T::zero() {
                    dx[i] = g[i] * d[i] / m[i];
                    dx[n + i] = g[i] * d[n + i] / m[i];
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Square-root magnitude compression with phase kept:
    /// `S * (|S| + eps)^(-1/2)`. Gradients at zero bins are zeroed.
    pub fn complex_compress(&mut self, x: Var, eps: T) -> Result<Var> {
        let n = complex_half(self, x)?;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); 2 * n];
        for i in 0..n {
            let k = (d[i].hypot(d[n + i]) + eps).sqrt().recip();
            out[i] = d[i] * k;
            out[n + i] = d[n + i] * k;
        }
        let out = Tensor::new(self.shape(x), out)?;
        Ok(self.push(out, vec![x], move |ctx: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            let d = ctx.input(0).data();
            let half = T::of(0.5);
            let mut dx = vec![T::zero(); 2 * n];
            for i in 0..n {
                let (re, im) = (d[i], d[n + i]);
                let m = re.hypot(im);
                if m <= T::zero() {
                    continue;
                }
                let k = (m + eps).sqrt().recip();
                // dk/dm = -1/2 (m + eps)^(-3/2)
                let dk = -half * k * k * k;
                let proj = (g[i] * re + g[n + i] * im) * dk / m;
                dx[i] = g[i] * k + proj * re;
                dx[n + i] = g[n + i] * k + proj * im;
            }
            vec![Some(dx)]
        }))
    }
}
