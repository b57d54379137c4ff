//! Evaluation: classic STOI, word error rate and the challenge score
//! `(STOI + (1 - WER)) / 2`.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::TimeSignal;
use crate::error::{Error, Result};

/// Internal STOI sample rate.
pub const STOI_RATE: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_FFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
/// Frames per intermediate intelligibility segment (384 ms).
pub const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// Symmetric Hann window without the zero end points.
fn hanning_open(n: usize) -> Vec<f64> {
    (1..=n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos()).collect()
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, q) = (1.0, 1.0, x * x / 4.0);
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Rational resampling by `up / down` with a Kaiser-windowed sinc filter
/// designed for 60 dB stopband rejection, output aligned with the input.
pub fn resample(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    if up == down {
        return x.to_vec();
    }
    let cutoff = 1.0 / (2 * up.max(down)) as f64;
    let rejection = 60.0;
    let half = ((rejection - 8.0) / (28.714 * cutoff / 10.0)).ceil() as i64;
    let beta = 0.1102 * (rejection - 8.7);
    let n = 2 * half + 1;
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i - half) as f64;
            let arg = 2.0 * cutoff * t;
            let sinc = if arg == 0.0 { 1.0 } else { (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg) };
            let r = 2.0 * i as f64 / (n - 1) as f64 - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta) * sinc
        })
        .collect();
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / total);
    let out_len = (x.len() * up).div_ceil(down);
    let (up, down) = (up as i64, down as i64);
    (0..out_len as i64)
        .map(|i| {
            // Output sample i sits at upsampled time i * down; input sample
            // m sits at m * up.
            let centre = i * down;
            let lo = (centre - half).max(0);
            let hi = (centre + half).min((x.len() as i64 - 1) * up);
            let first = lo.div_euclid(up) + i64::from(lo.rem_euclid(up) != 0);
            let mut acc = 0.0;
            let mut m = first;
            while m * up <= hi {
                acc += h[(centre - m * up + half) as usize] * x[m as usize];
                m += 1;
            }
            acc
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(frame)).step_by(hop)
}

/// Drops frames of both signals where the reference is more than the
/// dynamic range below its loudest frame, then overlap-adds the rest.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    let w = hanning_open(STOI_FRAME);
    let starts: Vec<usize> = frame_starts(x.len(), STOI_FRAME, hop).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..STOI_FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let top = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts.iter().zip(&energy).filter(|(_, &e)| top - STOI_DYN_RANGE_DB - e < 0.0).map(|(&s, _)| s).collect();
    let len = if kept.is_empty() { 0 } else { (kept.len() - 1) * hop + STOI_FRAME };
    let (mut xo, mut yo) = (vec![0.0; len], vec![0.0; len]);
    for (k, &s) in kept.iter().enumerate() {
        for i in 0..STOI_FRAME {
            xo[k * hop + i] += w[i] * x[s + i];
            yo[k * hop + i] += w[i] * y[s + i];
        }
    }
    (xo, yo)
}

/// One-third octave band magnitudes, `[frame][band]`.
fn third_octave(x: &[f64]) -> Vec<[f64; STOI_BANDS]> {
    let bins = STOI_FFT / 2 + 1;
    let freq = |k: usize| k as f64 * STOI_RATE as f64 / STOI_FFT as f64;
    let nearest = |target: f64| {
        (0..bins).min_by(|&a, &b| (freq(a) - target).abs().total_cmp(&(freq(b) - target).abs())).unwrap_or(0)
    };
    let edges: Vec<(usize, usize)> = (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            (
                nearest(STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0)),
                nearest(STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0)),
            )
        })
        .collect();
    let w = hanning_open(STOI_FRAME);
    let fft = FftPlanner::new().plan_fft_forward(STOI_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); STOI_FFT];
    frame_starts(x.len(), STOI_FRAME, STOI_FRAME / 2)
        .map(|s| {
            buf.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
            for i in 0..STOI_FRAME {
                buf[i].re = w[i] * x[s + i];
            }
            fft.process(&mut buf);
            let mut bands = [0.0; STOI_BANDS];
            for (b, &(lo, hi)) in edges.iter().enumerate() {
                bands[b] = buf[lo..hi].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            }
            bands
        })
        .collect()
}

/// Classic short-time objective intelligibility of `estimate` against
/// `reference`, both mono and at the same rate.
pub fn stoi(reference: &TimeSignal, estimate: &TimeSignal) -> Result<f64> {
    if reference.channels() != 1 || estimate.channels() != 1 {
        return Err(Error::Shape("STOI takes single-channel signals".into()));
    }
    if reference.len() != estimate.len() || reference.sample_rate != estimate.sample_rate {
        return Err(Error::Shape(format!(
            "reference {} samples at {} Hz, estimate {} at {} Hz",
            reference.len(),
            reference.sample_rate,
            estimate.len(),
            estimate.sample_rate
        )));
    }
    let x = reference.channel(0).to_vec();
    let y = estimate.channel(0).to_vec();
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::Signal("STOI of a silent reference is undefined".into()));
    }
    stoi_raw(&x, &y, reference.sample_rate as usize)
}

fn stoi_raw(x: &[f64], y: &[f64], rate: usize) -> Result<f64> {
    let (x, y) = if rate == STOI_RATE as usize {
        (x.to_vec(), y.to_vec())
    } else {
        (resample(x, STOI_RATE as usize, rate), resample(y, STOI_RATE as usize, rate))
    };
    let (x, y) = remove_silent_frames(&x, &y);
    let (xb, yb) = (third_octave(&x), third_octave(&y));
    if xb.len() < STOI_SEGMENT {
        return Err(Error::Signal(format!(
            "{} active STOI frames, need at least {STOI_SEGMENT}",
            xb.len()
        )));
    }
    let clip = 10f64.powf(-STOI_BETA_DB / 20.0);
    let n = STOI_SEGMENT as f64;
    let centred_unit = |v: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / n;
        v.iter_mut().for_each(|e| *e -= mean);
        let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt() + f64::EPSILON;
        v.iter_mut().for_each(|e| *e /= norm);
    };
    let segments = xb.len() - STOI_SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..segments {
        for band in 0..STOI_BANDS {
            let mut xs: Vec<f64> = (m..m + STOI_SEGMENT).map(|t| xb[t][band]).collect();
            let ys: Vec<f64> = (m..m + STOI_SEGMENT).map(|t| yb[t][band]).collect();
            let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();
            let scale = norm(&xs) / (norm(&ys) + f64::EPSILON);
            let mut yp: Vec<f64> = ys.iter().zip(&xs).map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip))).collect();
            centred_unit(&mut yp);
            centred_unit(&mut xs);
            total += yp.iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total / (segments * STOI_BANDS) as f64)
}

/// Minimal word-level edit distance over the reference length.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Signal("WER needs a non-empty reference".into()));
    }
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    for (i, r) in reference.iter().enumerate() {
        let mut row = vec![i + 1; hypothesis.len() + 1];
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r.as_ref() != h.as_ref());
            row[j + 1] = sub.min(prev[j + 1] + 1).min(row[j] + 1);
        }
        prev = row;
    }
    Ok(prev[hypothesis.len()] as f64 / reference.len() as f64)
}

/// Splits a transcript into lower-case word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// `(stoi + (1 - wer)) / 2`, both arguments in `[0, 1]`.
pub fn challenge_metric(stoi: f64, wer: f64) -> Result<f64> {
    for (name, v) in [("STOI", stoi), ("WER", wer)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok((stoi + 1.0 - wer) / 2.0)
}

/// Rounds to `decimals` places, ties to even. Ties are judged on the
/// decimal value, so `0.9695` counts as a tie despite its binary form.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let y = x * scale;
    let floor = y.floor();
    let frac = y - floor;
    let r = if (frac - 0.5).abs() < 1e-9 {
        if floor.rem_euclid(2.0) == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        y.round()
    };
    r / scale
}

/// Scores of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub stoi: f64,
    pub wer: Option<f64>,
}

impl UtteranceScore {
    /// Challenge score with WER clamped to 1; `None` without a transcript.
    pub fn combined(&self) -> Option<f64> {
        self.wer.map(|w| (self.stoi + 1.0 - w.min(1.0)) / 2.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub utterances: Vec<UtteranceScore>,
}

impl MetricReport {
    pub fn push(&mut self, score: UtteranceScore) {
        self.utterances.push(score);
    }

    fn mean(&self, f: impl Fn(&UtteranceScore) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.utterances.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_stoi(&self) -> Option<f64> {
        self.mean(|u| Some(u.stoi))
    }

    pub fn mean_wer(&self) -> Option<f64> {
        self.mean(|u| u.wer)
    }

    /// Challenge score of the averaged STOI and clamped WER.
    pub fn combined(&self) -> Option<f64> {
        Some((self.mean_stoi()? + 1.0 - self.mean_wer()?.min(1.0)) / 2.0)
    }

    /// Aligned table, one utterance per line, then the mean.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{:<16} {:>8} {:>8} {:>8}\n", "utterance", "stoi", "wer", "combined");
        for u in &self.utterances {
            let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>8}", u.id, cell(Some(u.stoi)), cell(u.wer), cell(u.combined()));
        }
        let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>8}", "mean", cell(self.mean_stoi()), cell(self.mean_wer()), cell(self.combined()));
        s
    }

    /// `key = value` lines, `<id>.<metric>` per utterance and `mean.<metric>`.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let mut emit = |id: &str, stoi: Option<f64>, wer: Option<f64>, combined: Option<f64>| {
            for (k, v) in [("stoi", stoi), ("wer", wer), ("combined", combined)] {
                if let Some(v) = v {
                    let _ = writeln!(s, "{id}.{k} = {v}");
                }
            }
        };
        for u in &self.utterances {
            emit(&u.id, Some(u.stoi), u.wer, u.combined());
        }
        emit("mean", self.mean_stoi(), self.mean_wer(), self.combined());
        s
    }
}
