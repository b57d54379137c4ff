//! Elementwise arithmetic, reductions and shape manipulation.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Var};
use crate::tensor::{strides, Real, Tensor};

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = zip_values(self, a, b, |x, y| x + y);
        Ok(self.push(out, vec![a, b], |_: &Ctx<'_, T>, g: &[T], needs: &[bool]| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.to_vec()),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = zip_values(self, a, b, |x, y| x - y);
        Ok(self.push(out, vec![a, b], |_: &Ctx<'_, T>, g: &[T], needs: &[bool]| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|&v| -v).collect()),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = zip_values(self, a, b, |x, y| x * y);
        Ok(self.push(out, vec![a, b], |ctx: &Ctx<'_, T>, g: &[T], needs: &[bool]| {
            let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
            vec![
                needs[0].then(|| g.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                needs[1].then(|| g.iter().zip(x).map(|(&g, &x)| g * x).collect()),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, vec![a], move |_: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, vec![a], |_: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, vec![a], |ctx: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            let two = T::of(2.0);
            let x = ctx.input(0).data();
            vec![Some(g.iter().zip(x).map(|(&g, &x)| two * g * x).collect())]
        })
    }

    /// `max(0, x)`; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, vec![a], |ctx: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            let x = ctx.input(0).data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, vec![a], |ctx: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            let y = ctx.output().data();
            vec![Some(
                g.iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect(),
            )]
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, vec![a], |ctx: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            let y = ctx.output().data();
            vec![Some(
                g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
            )]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let n = self.value(a).numel();
        self.push(out, vec![a], move |_: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let inv = T::one() / T::from_usize(n.max(1)).unwrap();
        let out = Tensor::scalar(self.value(a).sum() * inv);
        self.push(out, vec![a], move |_: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Sums over `axis`, dropping it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("sum_axis: axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, vec![a], move |_: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    dx[(o * len + l) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, vec![a], |_: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute {perm:?} of {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor::new(&out_shape, permute_data(self.value(a).data(), &shape, perm))?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(out, vec![a], move |_: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            vec![Some(permute_data(g, &out_shape, &inverse))]
        }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} of {first:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&self.value(p).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, parts.to_vec(), move |_: &Ctx<'_, T>, g: &[T], needs: &[bool]| {
            let mut offset = 0;
            lens.iter()
                .enumerate()
                .map(|(i, &len)| {
                    let start = offset;
                    offset += len;
                    needs[i].then(|| {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g[(o * total + start) * inner..][..len * inner]);
                        }
                        d
                    })
                })
                .collect()
        }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let reshaped = parts
            .iter()
            .map(|&p| {
                let mut s = vec![1];
                s.extend_from_slice(self.shape(p));
                self.reshape(p, &s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&reshaped, 0)
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, vec![a], move |_: &Ctx<'_, T>, g: &[T], _: &[bool]| {
            let mut dx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                dx[(o * full + start) * inner..][..len * inner]
                    .copy_from_slice(&g[o * len * inner..][..len * inner]);
            }
            vec![Some(dx)]
        }))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_values<T: Real>(g: &Graph<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (x, y) = (g.value(a), g.value(b));
    Tensor::new(
        x.shape(),
        x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
    )
    .expect("shapes checked")
}

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    // Innermost axis is walked in a tight loop, the rest by odometer.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
