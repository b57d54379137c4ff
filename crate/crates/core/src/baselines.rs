//! Reference systems: delay-and-sum, WPE dereverberation, mask-based MVDR
//! and a CRN that predicts filter-and-sum beamforming filters.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorgrad::{Graph, ParamStore, Real, Var};

use crate::crn::{crn_forward, init_crn, Binder, CrnConfig, DecoderMode};
use crate::dsp::{Spectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::pipeline::{complex_to_channels, ModelConfig};

type CMat = DMatrix<Complex64>;
type CVec = DVector<Complex64>;

fn column(y: &Spectrogram, t: usize, f: usize) -> CVec {
    CVec::from_iterator(y.channels(), (0..y.channels()).map(|p| y.get(p, t, f)))
}

/// Aligns channels by advancing channel `p` by `delays[p]` samples (phase
/// rotation per bin) and averages them.
pub fn delay_and_sum(y: &Spectrogram, delays: &[f64]) -> Result<Spectrogram> {
    let (p, frames, bins) = y.dim();
    if delays.len() != p {
        return Err(Error::Shape(format!("{} delays for {p} channels", delays.len())));
    }
    let n = y.config.fft as f64;
    let mut out = Spectrogram::zeros(1, frames, y.config);
    for f in 0..bins {
        let steer: Vec<Complex64> = delays.iter().map(|&d| Complex64::from_polar(1.0, 2.0 * PI * f as f64 * d / n)).collect();
        for t in 0..frames {
            let acc: Complex64 = (0..p).map(|c| y.get(c, t, f) * steer[c]).sum();
            out.set(0, t, f, acc / p as f64);
        }
    }
    Ok(out)
}

/// Weighted prediction error settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WpeConfig {
    /// Prediction taps per channel.
    pub taps: usize,
    /// Prediction delay in frames.
    pub delay: usize,
    pub iterations: usize,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self { taps: 10, delay: 3, iterations: 3 }
    }
}

/// STFT used around WPE: a 128-sample hop keeps the prediction delay
/// clear of the frame overlap.
pub fn wpe_stft() -> StftConfig {
    StftConfig { hop: 128, ..StftConfig::default() }
}

pub const WPE_POWER_FLOOR: f64 = 1e-10;

/// Multichannel WPE applied independently in each band.
pub fn wpe(y: &Spectrogram, cfg: &WpeConfig) -> Result<Spectrogram> {
    let mut out = y.clone();
    out.nyquist = None;
    if cfg.taps == 0 || cfg.iterations == 0 {
        return Ok(out);
    }
    let (p, frames, bins) = y.dim();
    let pk = p * cfg.taps;
    let start = cfg.delay + cfg.taps - 1;
    if frames <= start {
        return Ok(out);
    }
    let n = frames - start;
    for f in 0..bins {
        // Observations (P x n) and stacked past frames Y(t - D - k),
        // k = 0..K-1 (PK x n), for t = start..frames.
        let obs = CMat::from_fn(p, n, |c, i| y.get(c, start + i, f));
        let past = CMat::from_fn(pk, n, |r, i| {
            let (k, c) = (r / p, r % p);
            y.get(c, start + i - cfg.delay - k, f)
        });
        let mut est = obs.clone();
        for _ in 0..cfg.iterations {
            let mut weighted = past.clone();
            for i in 0..n {
                let power = (est.column(i).iter().map(|v| v.norm_sqr()).sum::<f64>() / p as f64).max(WPE_POWER_FLOOR);
                weighted.column_mut(i).scale_mut(1.0 / power);
            }
            let r = &weighted * past.adjoint();
            let c = &weighted * obs.adjoint();
            let g = solve_loaded(r, &c, f)?;
            est = &obs - g.adjoint() * &past;
        }
        for i in 0..n {
            for c in 0..p {
                out.set(c, start + i, f, est[(c, i)]);
            }
        }
    }
    Ok(out)
}

/// Solves `R G = C` for Hermitian `R`, loading the diagonal when Cholesky
/// fails.
fn solve_loaded(r: CMat, c: &CMat, band: usize) -> Result<CMat> {
    if let Some(ch) = r.clone().cholesky() {
        return Ok(ch.solve(c));
    }
    let n = r.nrows();
    let trace = r.trace().re.abs();
    let mut load = if trace > 0.0 { 1e-6 * trace / n as f64 } else { 1e-10 };
    for _ in 0..12 {
        let loaded = &r + CMat::identity(n, n) * Complex64::from(load);
        if let Some(ch) = loaded.cholesky() {
            log::warn!("WPE normal equations singular in band {band}; loaded diagonal by {load:e}");
            return Ok(ch.solve(c));
        }
        load *= 10.0;
    }
    Err(Error::Numerical(format!("WPE normal equations in band {band} stay singular")))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CovarianceMode {
    /// One estimate over the whole utterance.
    Block,
    /// Recursive update `phi = lambda phi + (1 - lambda) m y y^H` per frame.
    Frame { forgetting: f64 },
}

impl CovarianceMode {
    pub fn frame() -> Self {
        CovarianceMode::Frame { forgetting: 0.98 }
    }
}

/// Mask-weighted speech and noise spatial covariances, one `P x P` matrix
/// per band.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceEstimate {
    pub speech: Vec<CMat>,
    pub noise: Vec<CMat>,
    pub mode: CovarianceMode,
}

fn check_masks(y: &Spectrogram, speech: &Array2<f64>, noise: &Array2<f64>) -> Result<()> {
    let (_, t, f) = y.dim();
    for (name, m) in [("speech", speech), ("noise", noise)] {
        if m.dim() != (t, f) {
            return Err(Error::Shape(format!("{name} mask {:?} for {t} x {f} bins", m.dim())));
        }
        if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Signal(format!("{name} mask leaves [0, 1]")));
        }
        if m.iter().all(|&v| v == 0.0) {
            return Err(Error::Signal(format!("{name} mask is all zero")));
        }
    }
    Ok(())
}

impl CovarianceEstimate {
    pub fn zeros(p: usize, bins: usize, mode: CovarianceMode) -> Self {
        Self { speech: vec![CMat::zeros(p, p); bins], noise: vec![CMat::zeros(p, p); bins], mode }
    }

    /// Utterance-level estimate normalized by the mask sums.
    pub fn block(y: &Spectrogram, speech: &Array2<f64>, noise: &Array2<f64>) -> Result<Self> {
        check_masks(y, speech, noise)?;
        let (p, frames, bins) = y.dim();
        let mut est = Self::zeros(p, bins, CovarianceMode::Block);
        for f in 0..bins {
            let (mut ws, mut wn) = (0.0, 0.0);
            for t in 0..frames {
                let v = column(y, t, f);
                let outer = &v * v.adjoint();
                est.speech[f] += &outer * Complex64::from(speech[[t, f]]);
                est.noise[f] += &outer * Complex64::from(noise[[t, f]]);
                ws += speech[[t, f]];
                wn += noise[[t, f]];
            }
            if ws > 0.0 {
                est.speech[f] /= Complex64::from(ws);
            }
            if wn > 0.0 {
                est.noise[f] /= Complex64::from(wn);
            }
        }
        Ok(est)
    }

    /// Folds frame `t` into the recursive estimate.
    pub fn update_frame(&mut self, y: &Spectrogram, t: usize, speech: &Array2<f64>, noise: &Array2<f64>) {
        let CovarianceMode::Frame { forgetting: lambda } = self.mode else {
            return;
        };
        for f in 0..y.bins() {
            let v = column(y, t, f);
            let outer = &v * v.adjoint();
            self.speech[f] = &self.speech[f] * Complex64::from(lambda) + &outer * Complex64::from((1.0 - lambda) * speech[[t, f]]);
            self.noise[f] = &self.noise[f] * Complex64::from(lambda) + &outer * Complex64::from((1.0 - lambda) * noise[[t, f]]);
        }
    }
}

/// Principal eigenvector of `phi_s` with the reference entry made real and
/// non-negative. Falls back to the reference microphone when `phi_s` is zero.
pub fn steering_vector(phi_s: &CMat) -> CVec {
    let p = phi_s.nrows();
    if phi_s.iter().all(|v| v.norm() == 0.0) {
        let mut e = CVec::zeros(p);
        e[0] = Complex64::new(1.0, 0.0);
        return e;
    }
    let h = (phi_s + phi_s.adjoint()) * Complex64::from(0.5);
    let eig = h.symmetric_eigen();
    let k = eig.eigenvalues.imax();
    let v: CVec = eig.eigenvectors.column(k).into_owned();
    let r = v[0].norm();
    if r > 0.0 {
        let phase = v[0].conj() / r;
        v * phase
    } else {
        v
    }
}

/// Diagonal loading applied to every noise covariance before inversion.
pub const MVDR_LOADING: f64 = 1e-6;

/// `w = phi_n^-1 d / (d^H phi_n^-1 d)` with `phi_n` loaded by
/// `1e-6 trace / P`.
pub fn mvdr_weights(phi_n: &CMat, d: &CVec) -> Result<CVec> {
    let p = phi_n.nrows();
    let trace = phi_n.trace().re.max(0.0);
    let load = if trace > 0.0 { MVDR_LOADING * trace / p as f64 } else { MVDR_LOADING };
    let loaded = phi_n + CMat::identity(p, p) * Complex64::from(load);
    let num = match loaded.clone().cholesky() {
        Some(ch) => ch.solve(d),
        None => loaded
            .lu()
            .solve(d)
            .ok_or_else(|| Error::Numerical("noise covariance is singular after loading".into()))?,
    };
    let den = d.dotc(&num);
    if den.norm() == 0.0 || !den.is_finite() {
        return Err(Error::Numerical("degenerate MVDR denominator".into()));
    }
    Ok(num / den)
}

/// Beamformer output with the weights and steering vectors that produced it.
#[derive(Clone, Debug)]
pub struct MvdrResult {
    pub output: Spectrogram,
    /// `(frames, bins, P)`; block mode repeats one vector per band.
    pub weights: Array3<Complex64>,
    pub steering: Array3<Complex64>,
    /// Largest `|w^H d - 1|` over all weight vectors.
    pub constraint_error: f64,
}

/// Applies per-bin weights: `out(t, f) = w(t, f)^H y(t, f)`.
pub fn apply_weights(y: &Spectrogram, weights: &Array3<Complex64>) -> Result<Spectrogram> {
    let (p, frames, bins) = y.dim();
    if weights.dim() != (frames, bins, p) {
        return Err(Error::Shape(format!("weights {:?} for spectrogram {:?}", weights.dim(), y.dim())));
    }
    let mut out = Spectrogram::zeros(1, frames, y.config);
    for t in 0..frames {
        for f in 0..bins {
            let v: Complex64 = (0..p).map(|c| weights[[t, f, c]].conj() * y.get(c, t, f)).sum();
            out.set(0, t, f, v);
        }
    }
    Ok(out)
}

/// MVDR beamformer from time-frequency masks (shape `frames x bins`).
pub fn mask_mvdr(
    y: &Spectrogram,
    speech_mask: &Array2<f64>,
    noise_mask: &Array2<f64>,
    mode: CovarianceMode,
) -> Result<MvdrResult> {
    check_masks(y, speech_mask, noise_mask)?;
    let (p, frames, bins) = y.dim();
    let mut weights = Array3::zeros((frames, bins, p));
    let mut steering = Array3::zeros((frames, bins, p));
    let mut worst = 0.0f64;
    let mut record = |t: usize, f: usize, w: &CVec, d: &CVec| {
        for c in 0..p {
            weights[[t, f, c]] = w[c];
            steering[[t, f, c]] = d[c];
        }
        worst = worst.max((w.dotc(d) - Complex64::new(1.0, 0.0)).norm());
    };
    match mode {
        CovarianceMode::Block => {
            let cov = CovarianceEstimate::block(y, speech_mask, noise_mask)?;
            for f in 0..bins {
                let d = steering_vector(&cov.speech[f]);
                let w = mvdr_weights(&cov.noise[f], &d)?;
                for t in 0..frames {
                    record(t, f, &w, &d);
                }
            }
        }
        CovarianceMode::Frame { .. } => {
            let mut cov = CovarianceEstimate::zeros(p, bins, mode);
            for t in 0..frames {
                cov.update_frame(y, t, speech_mask, noise_mask);
                for f in 0..bins {
                    let d = steering_vector(&cov.speech[f]);
                    let w = mvdr_weights(&cov.noise[f], &d)?;
                    record(t, f, &w, &d);
                }
            }
        }
    }
    let output = apply_weights(y, &weights)?;
    Ok(MvdrResult { output, weights, steering, constraint_error: worst })
}

/// Ideal ratio masks on channel 0 from separately known speech and noise
/// spectrograms: `(speech, noise)`, each `frames x bins`.
pub fn oracle_masks(speech: &Spectrogram, noise: &Spectrogram) -> Result<(Array2<f64>, Array2<f64>)> {
    if speech.dim() != noise.dim() {
        return Err(Error::Shape(format!("speech {:?} vs noise {:?}", speech.dim(), noise.dim())));
    }
    let (_, frames, bins) = speech.dim();
    let ms = Array2::from_shape_fn((frames, bins), |(t, f)| {
        let (s, n) = (speech.get(0, t, f).norm_sqr(), noise.get(0, t, f).norm_sqr());
        if s + n > 0.0 {
            s / (s + n)
        } else {
            0.0
        }
    });
    let mn = ms.mapv(|v| 1.0 - v);
    Ok((ms, mn))
}

/// How much more the weights attenuate `noise` than `speech`, each
/// relative to its channel-0 energy, in dB.
pub fn interferer_attenuation_db(weights: &Array3<Complex64>, speech: &Spectrogram, noise: &Spectrogram) -> Result<f64> {
    let gain = |x: &Spectrogram| -> Result<f64> { Ok(apply_weights(x, weights)?.energy() / x.select(&[0]).energy()) };
    Ok(10.0 * (gain(speech)? / gain(noise)?).log10())
}

/// Complex filter-and-sum: `sum_p W_p * Y_p`. `filters` holds `(re, im)`
/// arrays shaped like `y`.
pub fn filter_and_sum(y: &Spectrogram, filters_re: &Array3<f64>, filters_im: &Array3<f64>) -> Result<Spectrogram> {
    if filters_re.dim() != y.dim() || filters_im.dim() != y.dim() {
        return Err(Error::Shape(format!("filters {:?} for spectrogram {:?}", filters_re.dim(), y.dim())));
    }
    let (p, frames, bins) = y.dim();
    let mut out = Spectrogram::zeros(1, frames, y.config);
    for t in 0..frames {
        for f in 0..bins {
            let v: Complex64 = (0..p)
                .map(|c| Complex64::new(filters_re[[c, t, f]], filters_im[[c, t, f]]) * y.get(c, t, f))
                .sum();
            out.set(0, t, f, v);
        }
    }
    Ok(out)
}

pub const FILTERSUM: &str = "filtersum.";

/// `[2, B, P, T, F]` mixture to `[2, B, 1, T, F]` through CRN-predicted
/// filters.
pub fn filtersum_graph<T: Real>(g: &mut Graph<T>, b: &mut Binder<'_, T>, cfg: &ModelConfig, y: Var) -> Result<Var> {
    let [_, batch, _, frames, bins] = g.shape(y)[..] else {
        return Err(Error::Shape(format!("filter-and-sum input {:?}", g.shape(y))));
    };
    let input = complex_to_channels(g, y)?;
    let (re, im) = crn_forward(g, b, FILTERSUM, &filtersum_crn(cfg), input, None)?;
    let w = g.stack(&[re, im])?;
    let prod = g.complex_mul(w, y)?;
    let sum = g.sum_axis(prod, 2)?;
    Ok(g.reshape(sum, &[2, batch, 1, frames, bins])?)
}

pub fn filtersum_crn(cfg: &ModelConfig) -> CrnConfig {
    CrnConfig::new(2 * cfg.mics, 2 * cfg.mics, cfg.width_num, cfg.width_den, DecoderMode::Map)
}

/// Filter-and-sum neural beamformer on the CRN backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterSumModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> FilterSumModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_crn(&filtersum_crn(&config), FILTERSUM, &mut rng, &mut params)?;
        Ok(Self { config, params })
    }

    pub fn filter_and_sum_nn(&self, y: &Spectrogram) -> Result<Spectrogram> {
        if y.channels() != self.config.mics {
            return Err(Error::Shape(format!("model expects {} channels, got {}", self.config.mics, y.channels())));
        }
        let mut g = Graph::new();
        let mut b = Binder::eval(&self.params);
        let yv = g.constant(y.to_tensor());
        let out = filtersum_graph(&mut g, &mut b, &self.config, yv)?;
        Spectrogram::from_tensor(g.value(out), 0, y.config)
    }
}
