//! Fully connected layer and the fused LSTM layer.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Var};
use crate::ops::basic::sigmoid;
use crate::tensor::{Real, Tensor};

/// Parameters of one LSTM direction in one layer. Gate order along the
/// `4H` axis is input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[4H, D]`
    pub w_ih: Var,
    /// `[4H, H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

fn seq_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, d] => Ok((1, t, d)),
        [n, t, d] => Ok((n, t, d)),
        _ => Err(Error::Shape(format!("expected [T, D] or [N, T, D], got {shape:?}"))),
    }
}

/// `[a, b, inner]` -> `[b, a, inner]`.
fn swap01<T: Copy>(data: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for j in 0..b {
        for i in 0..a {
            out.extend_from_slice(&data[(i * b + j) * inner..][..inner]);
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// `x W^T + b` applied to every row of the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let din = *shape.last().ok_or_else(|| Error::Shape("linear of a scalar".into()))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != din || self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!(
                "linear: input {shape:?}, weight {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        let dout = ws[0];
        let rows = self.value(x).numel() / din;
        let mut out = Vec::with_capacity(rows * dout);
        let bd = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bd);
        }
        T::gemm(rows, din, dout, T::one(), self.value(x).data(), din as isize, 1, self.value(w).data(), 1, din as isize, T::one(), &mut out, dout as isize, 1);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, vec![x, w, b], move |ctx: &Ctx<'_, T>, dy: &[T], needs: &[bool]| {
            let (xd, wd) = (ctx.input(0).data(), ctx.input(1).data());
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(rows, dout, din, T::one(), dy, dout as isize, 1, wd, din as isize, 1, T::zero(), &mut dx, din as isize, 1);
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(dout, rows, din, T::one(), dy, 1, dout as isize, xd, din as isize, 1, T::zero(), &mut dw, din as isize, 1);
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![T::zero(); dout];
                for row in dy.chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
                db
            });
            vec![dx, dw, db]
        }))
    }

    /// One LSTM layer in one direction over `[N, T, D]` (or `[T, D]`),
    /// zero initial state. Returns hidden states `[N, T, H]`.
    pub fn lstm_layer(&mut self, x: Var, p: LstmVars, reverse: bool) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let (n, steps, d) = seq_view(&in_shape)?;
        let hs = self.shape(p.w_hh).to_vec();
        if hs.len() != 2 || hs[0] != 4 * hs[1] {
            return Err(Error::Shape(format!("lstm w_hh must be [4H, H], got {hs:?}")));
        }
        let h = hs[1];
        let g4 = 4 * h;
        if self.shape(p.w_ih) != [g4, d] || self.shape(p.bias) != [g4] {
            return Err(Error::Shape(format!(
                "lstm w_ih {:?} / bias {:?} do not match input width {d}, hidden {h}",
                self.shape(p.w_ih),
                self.shape(p.bias)
            )));
        }
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        // Internally everything is time-major, [T, N, *], so the rows one
        // recurrence step touches are contiguous.
        let x_tm = swap01(self.value(x).data(), n, steps, d);
        let (wih, whh, bd) = (self.value(p.w_ih).data(), self.value(p.w_hh).data(), self.value(p.bias).data());
        let rows = n * steps;
        let mut gates = Vec::with_capacity(rows * g4);
        for _ in 0..rows {
            gates.extend_from_slice(bd);
        }
        T::gemm(rows, d, g4, T::one(), &x_tm, d as isize, 1, wih, 1, d as isize, T::one(), &mut gates, g4 as isize, 1);
        let mut cells = vec![T::zero(); rows * h];
        let mut hidden = vec![T::zero(); rows * h];
        let zeros = vec![T::zero(); n * h];
        for (step, &t) in order.iter().enumerate() {
            let gt = &mut gates[t * n * g4..][..n * g4];
            if step > 0 {
                let tp = order[step - 1];
                // gates[t] += h[tp] W_hh^T
                T::gemm(n, h, g4, T::one(), &hidden[tp * n * h..], h as isize, 1, whh, 1, h as isize, T::one(), gt, g4 as isize, 1);
            }
            let (done, rest) = cells.split_at_mut(t * n * h);
            let (ct, later) = rest.split_at_mut(n * h);
            let c_prev: &[T] = match (step > 0).then(|| order[step - 1]) {
                Some(tp) if tp < t => &done[tp * n * h..][..n * h],
                Some(_) => &later[..n * h],
                None => &zeros,
            };
            let ht = &mut hidden[t * n * h..][..n * h];
            for ni in 0..n {
                let z = &mut gt[ni * g4..][..g4];
                for j in 0..h {
                    z[j] = sigmoid(z[j]);
                    z[h + j] = sigmoid(z[h + j]);
                    z[2 * h + j] = z[2 * h + j].tanh();
                    z[3 * h + j] = sigmoid(z[3 * h + j]);
                    let c = z[h + j] * c_prev[ni * h + j] + z[j] * z[2 * h + j];
                    ct[ni * h + j] = c;
                    ht[ni * h + j] = z[3 * h + j] * c.tanh();
                }
            }
        }
        let mut out_shape = in_shape.clone();
        *out_shape.last_mut().unwrap() = h;
        let out = Tensor::new(&out_shape, swap01(&hidden, steps, n, h))?;
        Ok(self.push(out, vec![x, p.w_ih, p.w_hh, p.bias], move |ctx: &Ctx<'_, T>, dy: &[T], needs: &[bool]| {
            let (wih, whh) = (ctx.input(1).data(), ctx.input(2).data());
            let dy = swap01(dy, n, steps, h);
            let mut dz = vec![T::zero(); rows * g4];
            let mut dh_next = vec![T::zero(); n * h];
            let mut dc_next = vec![T::zero(); n * h];
            let mut dwhh = needs[2].then(|| vec![T::zero(); g4 * h]);
            for step in (0..steps).rev() {
                let t = order[step];
                let prev = (step > 0).then(|| order[step - 1]);
                let dzt = &mut dz[t * n * g4..][..n * g4];
                for ni in 0..n {
                    let r = t * n + ni;
                    let a = &gates[r * g4..][..g4];
                    let dzr = &mut dzt[ni * g4..][..g4];
                    for j in 0..h {
                        let (i, f, g, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                        let tc = cells[r * h + j].tanh();
                        let dh = dy[r * h + j] + dh_next[ni * h + j];
                        let dc = dh * o * (T::one() - tc * tc) + dc_next[ni * h + j];
                        let c_prev = prev.map_or(T::zero(), |tp| cells[(tp * n + ni) * h + j]);
                        dzr[j] = dc * g * i * (T::one() - i);
                        dzr[h + j] = dc * c_prev * f * (T::one() - f);
                        dzr[2 * h + j] = dc * i * (T::one() - g * g);
                        dzr[3 * h + j] = dh * tc * o * (T::one() - o);
                        dc_next[ni * h + j] = dc * f;
                    }
                }
                // dh_prev = dz_t W_hh
                T::gemm(n, g4, h, T::one(), dzt, g4 as isize, 1, whh, h as isize, 1, T::zero(), &mut dh_next, h as isize, 1);
                if let (Some(dw), Some(tp)) = (dwhh.as_mut(), prev) {
                    // dW_hh += dz_t^T h_prev
                    T::gemm(g4, n, h, T::one(), dzt, 1, g4 as isize, &hidden[tp * n * h..], h as isize, 1, T::one(), dw, h as isize, 1);
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * d];
                T::gemm(rows, g4, d, T::one(), &dz, g4 as isize, 1, wih, d as isize, 1, T::zero(), &mut dx, d as isize, 1);
                swap01(&dx, steps, n, d)
            });
            let dwih = needs[1].then(|| {
                let mut dw = vec![T::zero(); g4 * d];
                T::gemm(g4, rows, d, T::one(), &dz, 1, g4 as isize, &x_tm, d as isize, 1, T::zero(), &mut dw, d as isize, 1);
                dw
            });
            let db = needs[3].then(|| {
                let mut db = vec![T::zero(); g4];
                for row in dz.chunks(g4) {
                    db.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                }
                db
            });
            vec![dx, dwih, dwhh, db]
        }))
    }

    /// Stacked (optionally bidirectional) LSTM. `layers[l]` holds one entry
    /// per direction: `[forward]` or `[forward, backward]`; bidirectional
    /// outputs are concatenated forward-then-backward on the last axis.
    pub fn lstm_seq(&mut self, x: Var, layers: &[Vec<LstmVars>]) -> Result<Var> {
        let mut cur = x;
        for dirs in layers {
            cur = match dirs.as_slice() {
                [fwd] => self.lstm_layer(cur, *fwd, false)?,
                [fwd, bwd] => {
                    let f = self.lstm_layer(cur, *fwd, false)?;
                    let b = self.lstm_layer(cur, *bwd, true)?;
                    let axis = self.shape(f).len() - 1;
                    self.concat(&[f, b], axis)?
                }
                _ => return Err(Error::Config("an LSTM layer has one or two directions".into())),
            };
        }
        Ok(cur)
    }
}
