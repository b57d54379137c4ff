//! Short-time Fourier analysis/synthesis and spectral helpers.
//!
//! Analysis uses a periodic Hann window, 512-sample frames, a 64-sample hop
//! and a 512-point FFT. Only bins 0..256 are exposed in [`Spectrogram::re`]
//! and [`Spectrogram::im`]; the Nyquist bin is kept on the side so that
//! analysis followed by synthesis is exact, and anything that produces a
//! new spectrogram (masks, networks, beamformers) leaves it empty, which
//! synthesis reads as zero.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView1, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use tensorgrad::{Real, Tensor};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Multichannel PCM block, `channels x length`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSignal {
    pub samples: Array2<f64>,
    pub sample_rate: u32,
}

impl TimeSignal {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn from_channels(channels: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Signal("channels differ in length".into()));
        }
        let flat: Vec<f64> = channels.iter().flatten().copied().collect();
        let samples = Array2::from_shape_vec((channels.len(), len), flat)
            .map_err(|e| Error::Signal(e.to_string()))?;
        Ok(Self { samples, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Self {
        let len = samples.len();
        Self {
            samples: Array2::from_shape_vec((1, len), samples).expect("1 x len"),
            sample_rate,
        }
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Self {
        Self {
            samples: Array2::zeros((channels, len)),
            sample_rate,
        }
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, p: usize) -> ArrayView1<'_, f64> {
        self.samples.row(p)
    }

    pub fn channel_signal(&self, p: usize) -> TimeSignal {
        TimeSignal::mono(self.samples.row(p).to_vec(), self.sample_rate)
    }

    pub fn energy(&self, p: usize) -> f64 {
        self.samples.row(p).iter().map(|v| v * v).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub frame: usize,
    pub hop: usize,
    pub fft: usize,
}

impl Default for StftConfig {
    /// 32 ms frames, 4 ms hop, 512-point FFT at 16 kHz.
    fn default() -> Self {
        Self {
            frame: 512,
            hop: 64,
            fft: 512,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame != self.fft || self.fft % 2 != 0 || self.hop == 0 || self.hop > self.frame {
            return Err(Error::Config(format!("unsupported STFT settings {self:?}")));
        }
        Ok(())
    }

    /// Frames needed to cover `len` samples after tail zero-padding.
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        if len < self.frame {
            return Err(Error::Signal(format!(
                "signal of {len} samples is shorter than one {}-sample frame",
                self.frame
            )));
        }
        Ok((len - self.frame).div_ceil(self.hop) + 1)
    }

    pub fn window(&self) -> Vec<f64> {
        hann(self.frame)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex spectrogram, `(channels, frames, bins)` with `bins = fft / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub re: Array3<f64>,
    pub im: Array3<f64>,
    /// Real Nyquist bin per `(channel, frame)`, present only on analysis
    /// output.
    pub nyquist: Option<Array2<f64>>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn new(re: Array3<f64>, im: Array3<f64>, config: StftConfig) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::Shape(format!("re {:?} vs im {:?}", re.dim(), im.dim())));
        }
        if re.dim().2 != config.bins() {
            return Err(Error::Shape(format!(
                "{} bins for a {}-point FFT",
                re.dim().2,
                config.fft
            )));
        }
        Ok(Self {
            re,
            im,
            nyquist: None,
            config,
        })
    }

    pub fn zeros(channels: usize, frames: usize, config: StftConfig) -> Self {
        let dim = (channels, frames, config.bins());
        Self {
            re: Array3::zeros(dim),
            im: Array3::zeros(dim),
            nyquist: None,
            config,
        }
    }

    pub fn channels(&self) -> usize {
        self.re.dim().0
    }

    pub fn frames(&self) -> usize {
        self.re.dim().1
    }

    pub fn bins(&self) -> usize {
        self.re.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.re.dim()
    }

    pub fn get(&self, p: usize, t: usize, f: usize) -> Complex64 {
        Complex64::new(self.re[[p, t, f]], self.im[[p, t, f]])
    }

    pub fn set(&mut self, p: usize, t: usize, f: usize, v: Complex64) {
        self.re[[p, t, f]] = v.re;
        self.im[[p, t, f]] = v.im;
    }

    /// Keeps the listed channels, in order.
    pub fn select(&self, channels: &[usize]) -> Spectrogram {
        Spectrogram {
            re: self.re.select(Axis(0), channels),
            im: self.im.select(Axis(0), channels),
            nyquist: self.nyquist.as_ref().map(|n| n.select(Axis(0), channels)),
            config: self.config,
        }
    }

    pub fn energy(&self) -> f64 {
        self.re.iter().map(|v| v * v).sum::<f64>() + self.im.iter().map(|v| v * v).sum::<f64>()
    }

    /// Stacked complex tensor `[2, 1, P, T, F]` (real parts first).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        stack_complex(&[self])
    }

    /// Inverse of [`Spectrogram::to_tensor`] for batch element `b` of a
    /// `[2, B, P, T, F]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, b: usize, config: StftConfig) -> Result<Self> {
        let [two, batch, p, frames, bins] = *t.shape() else {
            return Err(Error::Shape(format!("expected [2, B, P, T, F], got {:?}", t.shape())));
        };
        if two != 2 || b >= batch {
            return Err(Error::Shape(format!("batch element {b} of {:?}", t.shape())));
        }
        let plane = p * frames * bins;
        let half = batch * plane;
        let take = |off: usize| {
            t.data()[off + b * plane..][..plane]
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect::<Vec<_>>()
        };
        let re = Array3::from_shape_vec((p, frames, bins), take(0)).expect("plane size");
        let im = Array3::from_shape_vec((p, frames, bins), take(half)).expect("plane size");
        Spectrogram::new(re, im, config)
    }
}

/// `[2, B, P, T, F]` tensor from equally shaped spectrograms.
pub fn stack_complex<T: Real>(specs: &[&Spectrogram]) -> Tensor<T> {
    let (p, t, f) = specs[0].dim();
    let mut data = Vec::with_capacity(2 * specs.len() * p * t * f);
    for part in 0..2 {
        for s in specs {
            assert_eq!(s.dim(), (p, t, f), "batch spectrograms must share a shape");
            let src = if part == 0 { &s.re } else { &s.im };
            data.extend(src.iter().map(|&v| T::of(v)));
        }
    }
    Tensor::new(&[2, specs.len(), p, t, f], data).expect("shape matches data")
}

/// Complex mask with the shape of the spectrogram it multiplies.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMask {
    pub re: Array3<f64>,
    pub im: Array3<f64>,
}

impl ComplexMask {
    pub fn unit(dim: (usize, usize, usize)) -> Self {
        Self {
            re: Array3::ones(dim),
            im: Array3::zeros(dim),
        }
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

pub fn stft(x: &TimeSignal, config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    let frames = config.num_frames(x.len())?;
    let bins = config.bins();
    let n = config.fft;
    let window = config.window();
    let fft = plans(n).forward;
    let mut out = Spectrogram::zeros(x.channels(), frames, *config);
    let mut nyq = Array2::zeros((x.channels(), frames));
    let mut buf = vec![Complex64::default(); n];
    for p in 0..x.channels() {
        let ch = x.channel(p);
        for t in 0..frames {
            let start = t * config.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let v = ch.get(start + i).copied().unwrap_or(0.0);
                *b = Complex64::new(v * window[i], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..bins {
                out.re[[p, t, f]] = buf[f].re;
                out.im[[p, t, f]] = buf[f].im;
            }
            nyq[[p, t]] = buf[bins].re;
        }
    }
    out.nyquist = Some(nyq);
    Ok(out)
}

/// Weighted overlap-add synthesis, normalized by the summed squared window,
/// truncated or zero-padded to `length`.
pub fn istft(spec: &Spectrogram, length: usize) -> Result<TimeSignal> {
    let config = spec.config;
    config.validate()?;
    let (channels, frames, bins) = spec.dim();
    if bins != config.bins() {
        return Err(Error::Shape(format!("{bins} bins for a {}-point FFT", config.fft)));
    }
    if let Some(n) = &spec.nyquist {
        if n.dim() != (channels, frames) {
            return Err(Error::Shape("nyquist row does not match spectrogram".into()));
        }
    }
    let n = config.fft;
    let window = config.window();
    let ifft = plans(n).inverse;
    let span = (frames.max(1) - 1) * config.hop + config.frame;
    let mut wsum = vec![0.0; span];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            wsum[t * config.hop + i] += w * w;
        }
    }
    let mut out = Array2::zeros((channels, length));
    let mut buf = vec![Complex64::default(); n];
    let mut acc = vec![0.0; span];
    for p in 0..channels {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..frames {
            buf[0] = Complex64::new(spec.re[[p, t, 0]], 0.0);
            for f in 1..bins {
                let v = spec.get(p, t, f);
                buf[f] = v;
                buf[n - f] = v.conj();
            }
            let nyq = spec.nyquist.as_ref().map_or(0.0, |a| a[[p, t]]);
            buf[bins] = Complex64::new(nyq, 0.0);
            ifft.process(&mut buf);
            let start = t * config.hop;
            for (i, w) in window.iter().enumerate() {
                acc[start + i] += w * buf[i].re / n as f64;
            }
        }
        let mut row = out.row_mut(p);
        for i in 0..length.min(span) {
            if wsum[i] > 1e-10 {
                row[i] = acc[i] / wsum[i];
            }
        }
    }
    Ok(TimeSignal::new(out, SAMPLE_RATE))
}

/// Complex elementwise product `Y * M`.
pub fn apply_mask(y: &Spectrogram, m: &ComplexMask) -> Result<Spectrogram> {
    if m.re.dim() != y.dim() || m.im.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs spectrogram {:?}",
            m.re.dim(),
            y.dim()
        )));
    }
    let re = &y.re * &m.re - &y.im * &m.im;
    let im = &y.re * &m.im + &y.im * &m.re;
    Spectrogram::new(re, im, y.config)
}

/// Guard added to magnitudes before square-root compression.
pub const COMPRESS_EPS: f64 = 1e-8;

/// Replaces each magnitude by its square root, keeping the phase:
/// `S * (|S| + eps)^(-1/2)`.
pub fn compress_sqrt(spec: &Spectrogram) -> Spectrogram {
    let mut out = Spectrogram::zeros(spec.channels(), spec.frames(), spec.config);
    ndarray::Zip::from(&mut out.re)
        .and(&mut out.im)
        .and(&spec.re)
        .and(&spec.im)
        .for_each(|or, oi, &r, &i| {
            let k = 1.0 / (r.hypot(i) + COMPRESS_EPS).sqrt();
            *or = r * k;
            *oi = i * k;
        });
    out
}

/// Exact ratio mask `S / Y`, zero where `|Y| <= eps`.
pub fn ratio_mask(target: &Spectrogram, mixture: &Spectrogram, eps: f64) -> Result<ComplexMask> {
    if target.dim() != mixture.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", target.dim(), mixture.dim())));
    }
    let mut re = Array3::zeros(target.dim());
    let mut im = Array3::zeros(target.dim());
    for ((idx, r), i) in re.indexed_iter_mut().zip(im.iter_mut()) {
        let y = Complex64::new(mixture.re[idx], mixture.im[idx]);
        if y.norm() > eps {
            let m = Complex64::new(target.re[idx], target.im[idx]) / y;
            *r = m.re;
            *i = m.im;
        }
    }
    Ok(ComplexMask { re, im })
}

/// Interior sample range unaffected by the first and last frame edges.
pub fn interior(len: usize, config: &StftConfig) -> std::ops::Range<usize> {
    let lo = config.frame.min(len);
    let hi = len.saturating_sub(config.frame).max(lo);
    lo..hi
}

/// Magnitude of one channel, `(frames, bins)`.
pub fn magnitude(spec: &Spectrogram, p: usize) -> Array2<f64> {
    let re = spec.re.slice(s![p, .., ..]);
    let im = spec.im.slice(s![p, .., ..]);
    ndarray::Zip::from(&re).and(&im).map_collect(|&r, &i| r.hypot(i))
}
