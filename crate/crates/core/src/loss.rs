//! Training objective on square-root compressed spectra: real/imaginary
//! and magnitude errors plus a penalty on magnitude under-estimation.
//!
//! Every term is a mean over complex bins.

use ndarray::Zip;
use tensorgrad::{Graph, Real, Var};

use crate::dsp::{compress_sqrt, Spectrogram, COMPRESS_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the over-suppression penalty.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 2.0 }
    }
}

fn check(est: &Spectrogram, tgt: &Spectrogram) -> Result<()> {
    if est.dim() != tgt.dim() {
        return Err(Error::Shape(format!("estimate {:?} vs target {:?}", est.dim(), tgt.dim())));
    }
    Ok(())
}

/// Mean of `f(est_re, est_im, tgt_re, tgt_im)` over bins.
fn bin_mean(est: &Spectrogram, tgt: &Spectrogram, f: impl Fn(f64, f64, f64, f64) -> f64) -> f64 {
    let mut acc = 0.0;
    Zip::from(&est.re).and(&est.im).and(&tgt.re).and(&tgt.im).for_each(|&a, &b, &c, &d| acc += f(a, b, c, d));
    acc / est.re.len().max(1) as f64
}

/// Squared real, imaginary and magnitude errors. Inputs are expected to be
/// compressed already.
pub fn ri_mag_loss(est: &Spectrogram, tgt: &Spectrogram) -> Result<f64> {
    check(est, tgt)?;
    Ok(bin_mean(est, tgt, |er, ei, tr, ti| {
        (er - tr).powi(2) + (ei - ti).powi(2) + (er.hypot(ei) - tr.hypot(ti)).powi(2)
    }))
}

/// Squared shortfall of the estimated magnitude below the target.
pub fn mag_hurts_loss(est: &Spectrogram, tgt: &Spectrogram) -> Result<f64> {
    check(est, tgt)?;
    Ok(bin_mean(est, tgt, |er, ei, tr, ti| (tr.hypot(ti) - er.hypot(ei)).max(0.0).powi(2)))
}

/// Compresses both spectra, then `ri_mag + alpha * mag_hurts`.
pub fn total_loss(est: &Spectrogram, tgt: &Spectrogram, w: LossWeights) -> Result<f64> {
    check(est, tgt)?;
    let (e, t) = (compress_sqrt(est), compress_sqrt(tgt));
    Ok(ri_mag_loss(&e, &t)? + w.alpha * mag_hurts_loss(&e, &t)?)
}

/// Graph version of [`total_loss`] for complex tensors `[2, ...]`.
pub fn total_loss_graph<T: Real>(g: &mut Graph<T>, est: Var, tgt: Var, w: LossWeights) -> Result<Var> {
    if g.shape(est) != g.shape(tgt) {
        return Err(Error::Shape(format!("estimate {:?} vs target {:?}", g.shape(est), g.shape(tgt))));
    }
    let eps = T::of(COMPRESS_EPS);
    let e = g.complex_compress(est, eps)?;
    let t = g.complex_compress(tgt, eps)?;
    let d = g.sub(e, t)?;
    let d = g.square(d);
    let ri = g.sum_axis(d, 0)?;
    let me = g.complex_abs(e)?;
    let mt = g.complex_abs(t)?;
    let dm = g.sub(me, mt)?;
    let mag = g.square(dm);
    let per_bin = g.add(ri, mag)?;
    let ri_mag = g.mean(per_bin);
    let short = g.sub(mt, me)?;
    let short = g.relu(short);
    let short = g.square(short);
    let hurts = g.mean(short);
    let hurts = g.scale(hurts, T::of(w.alpha));
    Ok(g.add(ri_mag, hurts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use num_complex::Complex64;

    #[test]
    fn unit_estimate_against_silence() {
        let mut est = Spectrogram::zeros(1, 2, StftConfig::default());
        let tgt = est.clone();
        for f in 0..256 {
            est.set(0, 0, f, Complex64::from_polar(1.0, f as f64));
            est.set(0, 1, f, Complex64::from_polar(1.0, -(f as f64)));
        }
        let l = ri_mag_loss(&est, &tgt).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
        assert_eq!(mag_hurts_loss(&est, &tgt).unwrap(), 0.0);
        let z = Spectrogram::zeros(1, 2, StftConfig::default());
        assert!((mag_hurts_loss(&z, &est).unwrap() - 1.0).abs() < 1e-12);
    }
}
