//! Frequency-axis convolution and transposed convolution.
//!
//! Both ops take `[B, C, T, F]` (or `[C, T, F]`) inputs. The time kernel is
//! 1, so every (batch, frame) row is an independent 1-D problem along F and
//! both directions lower onto the same im2col/col2im pair plus one GEMM per
//! batch element.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Var};
use crate::layer::{LayerKind, LayerSpec};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct FreqGeom {
    channels: usize,
    frames: usize,
    /// Length of the longer (un-strided) frequency axis.
    long: usize,
    /// Length of the strided frequency axis.
    short: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl FreqGeom {
    fn src(&self, fo: usize, k: usize) -> Option<usize> {
        let f = (fo * self.s + k) as isize - self.p as isize;
        (f >= 0 && (f as usize) < self.long).then_some(f as usize)
    }
}

/// `cols[(c*K + k), (t*short + fo)] = x[c, t, fo*s + k - p]`.
fn im2col<T: Real>(x: &[T], g: FreqGeom) -> Vec<T> {
    let n = g.frames * g.short;
    let mut cols = vec![T::zero(); g.channels * g.k * n];
    for c in 0..g.channels {
        for k in 0..g.k {
            let row = &mut cols[(c * g.k + k) * n..][..n];
            for t in 0..g.frames {
                let xr = &x[(c * g.frames + t) * g.long..][..g.long];
                for fo in 0..g.short {
                    if let Some(f) = g.src(fo, k) {
                        row[t * g.short + fo] = xr[f];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds `cols` into `x`.
fn col2im<T: Real>(cols: &[T], g: FreqGeom, x: &mut [T]) {
    let n = g.frames * g.short;
    for c in 0..g.channels {
        for k in 0..g.k {
            let row = &cols[(c * g.k + k) * n..][..n];
            for t in 0..g.frames {
                let xr = &mut x[(c * g.frames + t) * g.long..][..g.long];
                for fo in 0..g.short {
                    if let Some(f) = g.src(fo, k) {
                        xr[f] += row[t * g.short + fo];
                    }
                }
            }
        }
    }
}

fn batch_view(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, t, f] => Ok((1, c, t, f)),
        [b, c, t, f] => Ok((b, c, t, f)),
        _ => Err(Error::Shape(format!("expected [B, C, T, F] or [C, T, F], got {shape:?}"))),
    }
}

fn check_params<T: Real>(g: &Graph<T>, w: Var, b: Var, spec: &LayerSpec, kind: LayerKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::Config(format!("expected a {kind:?} spec, got {:?}", spec.kind)));
    }
    if g.shape(w) != spec.weight_shape().as_slice() {
        return Err(Error::Config(format!(
            "{kind:?} weight {:?} does not match spec {:?}",
            g.shape(w),
            spec.weight_shape()
        )));
    }
    if g.shape(b) != [spec.out_channels] {
        return Err(Error::Config(format!("{kind:?} bias {:?}, expected [{}]", g.shape(b), spec.out_channels)));
    }
    Ok(())
}

fn bias_grad<T: Real>(dy: &[T], batch: usize, cout: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for b in 0..batch {
        for (co, d) in db.iter_mut().enumerate() {
            *d += dy[(b * cout + co) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    db
}

impl<T: Real> Graph<T> {
    /// Cross-correlation along frequency; `F' = (F + 2p - k) / s + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &LayerSpec) -> Result<Var> {
        check_params(self, w, b, spec, LayerKind::Conv2d)?;
        let in_shape = self.shape(x).to_vec();
        let (batch, cin, frames, f_in) = batch_view(&in_shape)?;
        if cin != spec.in_channels {
            return Err(Error::Shape(format!("conv2d expects {} channels, got {cin}", spec.in_channels)));
        }
        let f_out = spec.output_freq(f_in)?;
        let cout = spec.out_channels;
        let geom = FreqGeom {
            channels: cin,
            frames,
            long: f_in,
            short: f_out,
            k: spec.kernel.1,
            s: spec.stride.1,
            p: spec.padding.1,
        };
        let ck = cin * geom.k;
        let n = frames * f_out;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * cout * n];
        for bi in 0..batch {
            let cols = im2col(&xd[bi * cin * frames * f_in..][..cin * frames * f_in], geom);
            let ob = &mut out[bi * cout * n..][..cout * n];
            for (co, row) in ob.chunks_mut(n).enumerate() {
                row.fill(bd[co]);
            }
            crate::tensor::matmul_acc(cout, ck, n, wd, &cols, ob);
        }
        let mut out_shape = in_shape.clone();
        let r = out_shape.len();
        out_shape[r - 3] = cout;
        out_shape[r - 1] = f_out;
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, vec![x, w, b], move |ctx: &Ctx<'_, T>, dy: &[T], needs: &[bool]| {
            let (xd, wd) = (ctx.input(0).data(), ctx.input(1).data());
            let in_len = cin * frames * f_in;
            let mut dx = needs[0].then(|| vec![T::zero(); batch * in_len]);
            let mut dw = needs[1].then(|| vec![T::zero(); cout * ck]);
            for bi in 0..batch {
                let dyb = &dy[bi * cout * n..][..cout * n];
                if let Some(dw) = dw.as_mut() {
                    let cols = im2col(&xd[bi * in_len..][..in_len], geom);
                    // dW (cout x ck) += dY (cout x n) * cols^T (n x ck)
                    T::gemm(cout, n, ck, T::one(), dyb, n as isize, 1, &cols, 1, n as isize, T::one(), dw, ck as isize, 1);
                }
                if let Some(dx) = dx.as_mut() {
                    let mut dcols = vec![T::zero(); ck * n];
                    // dcols (ck x n) = W^T (ck x cout) * dY (cout x n)
                    T::gemm(ck, cout, n, T::one(), wd, 1, ck as isize, dyb, n as isize, 1, T::zero(), &mut dcols, n as isize, 1);
                    col2im(&dcols, geom, &mut dx[bi * in_len..][..in_len]);
                }
            }
            let db = needs[2].then(|| bias_grad(dy, batch, cout, n));
            vec![dx, dw, db]
        }))
    }

    /// Transposed convolution along frequency;
    /// `F' = (F - 1) s - 2p + k + output_padding`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, spec: &LayerSpec) -> Result<Var> {
        check_params(self, w, b, spec, LayerKind::Deconv2d)?;
        let in_shape = self.shape(x).to_vec();
        let (batch, cin, frames, f_in) = batch_view(&in_shape)?;
        if cin != spec.in_channels {
            return Err(Error::Shape(format!("deconv2d expects {} channels, got {cin}", spec.in_channels)));
        }
        let f_out = spec.output_freq(f_in)?;
        let cout = spec.out_channels;
        // The output is the long axis here: the forward pass is col2im.
        let geom = FreqGeom {
            channels: cout,
            frames,
            long: f_out,
            short: f_in,
            k: spec.kernel.1,
            s: spec.stride.1,
            p: spec.padding.1,
        };
        let ck = cout * geom.k;
        let n = frames * f_in;
        let plane = frames * f_out;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * cout * plane];
        let mut cols = vec![T::zero(); ck * n];
        for bi in 0..batch {
            // cols (ck x n) = W^T (ck x cin) * X (cin x n)
            T::gemm(ck, cin, n, T::one(), wd, 1, ck as isize, &xd[bi * cin * n..][..cin * n], n as isize, 1, T::zero(), &mut cols, n as isize, 1);
            let ob = &mut out[bi * cout * plane..][..cout * plane];
            for (co, row) in ob.chunks_mut(plane).enumerate() {
                row.fill(bd[co]);
            }
            col2im(&cols, geom, ob);
        }
        let mut out_shape = in_shape.clone();
        let r = out_shape.len();
        out_shape[r - 3] = cout;
        out_shape[r - 1] = f_out;
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, vec![x, w, b], move |ctx: &Ctx<'_, T>, dy: &[T], needs: &[bool]| {
            let (xd, wd) = (ctx.input(0).data(), ctx.input(1).data());
            let mut dx = needs[0].then(|| vec![T::zero(); batch * cin * n]);
            let mut dw = needs[1].then(|| vec![T::zero(); cin * ck]);
            for bi in 0..batch {
                let dcols = im2col(&dy[bi * cout * plane..][..cout * plane], geom);
                if let Some(dx) = dx.as_mut() {
                    // dX (cin x n) = W (cin x ck) * dcols (ck x n)
                    T::gemm(cin, ck, n, T::one(), wd, ck as isize, 1, &dcols, n as isize, 1, T::zero(), &mut dx[bi * cin * n..][..cin * n], n as isize, 1);
                }
                if let Some(dw) = dw.as_mut() {
                    // dW (cin x ck) += X (cin x n) * dcols^T (n x ck)
                    T::gemm(cin, n, ck, T::one(), &xd[bi * cin * n..][..cin * n], n as isize, 1, &dcols, 1, n as isize, T::one(), dw, ck as isize, 1);
                }
            }
            let db = needs[2].then(|| bias_grad(dy, batch, cout, plane));
            vec![dx, dw, db]
        }))
    }
}
