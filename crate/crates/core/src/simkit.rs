//! Shoebox scene simulation: image-source room impulse responses, mixing
//! at a target SNR, synthetic source signals, WAV I/O and dataset
//! manifests.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::dsp::{TimeSignal, SAMPLE_RATE};
use crate::error::{Error, Result};

pub type Point = [f64; 3];

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Half-width, in samples, of the windowed-sinc fractional delay kernel.
pub const SINC_HALF_WIDTH: usize = 8;

/// Which emitter of a scene an impulse response belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Emitter {
    Source,
    Noise,
}

/// Room, arrays, emitters and mixing level of one simulated utterance.
///
/// The microphone layout is a stand-in: two tetrahedral four-capsule
/// arrays, 20 cm apart at 1.3 m height.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub room: Point,
    /// Absorption of the walls at x=0, x=L, y=0, y=W, z=0, z=H.
    pub absorption: [f64; 6],
    pub array_centers: Vec<Point>,
    pub array_radius: f64,
    pub source: Point,
    pub noise: Point,
    pub snr_db: f64,
    pub max_order: i32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let grid = candidate_positions();
        Self {
            room: [6.0, 5.0, 3.0],
            absorption: [0.5; 6],
            array_centers: vec![[2.9, 2.5, 1.3], [3.1, 2.5, 1.3]],
            array_radius: 0.032,
            source: grid[0],
            noise: grid[grid.len() / 2 + 5],
            snr_db: 5.0,
            max_order: 6,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_mics(&self) -> usize {
        4 * self.array_centers.len()
    }

    /// Capsule positions, four per array on a regular tetrahedron.
    pub fn mic_positions(&self) -> Vec<Point> {
        let k = self.array_radius / 3f64.sqrt();
        let dirs = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        self.array_centers
            .iter()
            .flat_map(|c| dirs.iter().map(move |d| [c[0] + k * d[0], c[1] + k * d[1], c[2] + k * d[2]]))
            .collect()
    }

    pub fn emitter(&self, e: Emitter) -> Point {
        match e {
            Emitter::Source => self.source,
            Emitter::Noise => self.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Config(format!("room dimensions {:?}", self.room)));
        }
        if self.absorption.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config(format!("absorption {:?} outside [0, 1]", self.absorption)));
        }
        if self.max_order < 0 {
            return Err(Error::Config(format!("image order {} is negative", self.max_order)));
        }
        if self.snr_db.is_nan() {
            return Err(Error::Config("SNR is NaN".into()));
        }
        for (name, p) in [("source", self.source), ("noise", self.noise)] {
            if !self.inside(p) {
                return Err(Error::Config(format!("{name} {p:?} is not strictly inside the room")));
            }
        }
        for m in self.mic_positions() {
            if !self.inside(m) {
                return Err(Error::Config(format!("microphone {m:?} is outside the room")));
            }
        }
        Ok(())
    }

    fn inside(&self, p: Point) -> bool {
        (0..3).all(|i| p[i] > 0.0 && p[i] < self.room[i])
    }

    /// Stable 64-bit FNV-1a digest of every field.
    pub fn hash(&self) -> u64 {
        let mut text = String::new();
        let _ = write!(
            text,
            "{:?}{:?}{:?}{}{:?}{:?}{}{}{}",
            self.room,
            self.absorption,
            self.array_centers,
            self.array_radius,
            self.source,
            self.noise,
            self.snr_db,
            self.max_order,
            self.seed
        );
        fnv1a(text.as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The 252 candidate emitter positions: 12 azimuths x 7 distances
/// (0.6 m to 1.8 m) x 3 heights around the midpoint of the arrays.
pub fn candidate_positions() -> Vec<Point> {
    let center = [3.0, 2.5];
    let mut out = Vec::with_capacity(252);
    for &z in &[1.0, 1.3, 1.6] {
        for r in 0..7 {
            let dist = 0.6 + 0.2 * r as f64;
            for a in 0..12 {
                let az = 2.0 * PI * a as f64 / 12.0 + PI / 12.0;
                out.push([center[0] + dist * az.cos(), center[1] + dist * az.sin(), z]);
            }
        }
    }
    out
}

/// One mirrored copy of an emitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSource {
    pub position: Point,
    /// Number of wall reflections along the path.
    pub order: i32,
    /// Product of the reflection coefficients met along the path.
    pub gain: f64,
}

/// Image sources up to `scene.max_order` reflections for an emitter at `src`.
pub fn image_sources(scene: &SceneSpec, src: Point) -> Vec<ImageSource> {
    let beta: Vec<f64> = scene.absorption.iter().map(|a| (1.0 - a).sqrt()).collect();
    let n = scene.max_order;
    let mut out = Vec::new();
    for nx in -n..=n {
        for ny in -n..=n {
            for nz in -n..=n {
                for q in 0..8 {
                    let qs = [q & 1, (q >> 1) & 1, (q >> 2) & 1];
                    let ns = [nx, ny, nz];
                    let mut order = 0;
                    let mut gain = 1.0;
                    let mut position = [0.0; 3];
                    for i in 0..3 {
                        let (ni, qi) = (ns[i], qs[i]);
                        let lo = (ni - qi).abs();
                        let hi = ni.abs();
                        order += lo + hi;
                        gain *= beta[2 * i].powi(lo) * beta[2 * i + 1].powi(hi);
                        position[i] = (1 - 2 * qi) as f64 * src[i] + 2.0 * ni as f64 * scene.room[i];
                    }
                    if order <= n {
                        out.push(ImageSource { position, order, gain });
                    }
                }
            }
        }
    }
    out
}

fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Hann-windowed sinc evaluated `x` samples from the pulse centre.
fn windowed_sinc(x: f64) -> f64 {
    let w = SINC_HALF_WIDTH as f64;
    if x.abs() >= w {
        return 0.0;
    }
    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    sinc * 0.5 * (1.0 + (PI * x / w).cos())
}

/// Multichannel FIR, one row per microphone, at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomImpulseResponse {
    pub taps: Array2<f64>,
    pub scene_hash: u64,
}

impl RoomImpulseResponse {
    /// A unit impulse on each of `mics` channels.
    pub fn identity(mics: usize) -> Self {
        Self { taps: Array2::ones((mics, 1)), scene_hash: 0 }
    }

    pub fn mics(&self) -> usize {
        self.taps.nrows()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|v| v * v).sum()
    }
}

/// Direct-path delay in samples from `src` to each microphone.
pub fn direct_delays(scene: &SceneSpec, src: Point) -> Vec<f64> {
    scene
        .mic_positions()
        .iter()
        .map(|&m| distance(src, m) / SPEED_OF_SOUND * SAMPLE_RATE as f64)
        .collect()
}

pub fn simulate_rir(scene: &SceneSpec, emitter: Emitter) -> Result<RoomImpulseResponse> {
    scene.validate()?;
    let src = scene.emitter(emitter);
    let images: Vec<ImageSource> = image_sources(scene, src).into_iter().filter(|im| im.gain > 0.0).collect();
    let mics = scene.mic_positions();
    let fs = SAMPLE_RATE as f64;
    let max_delay = images
        .iter()
        .flat_map(|im| mics.iter().map(move |&m| distance(im.position, m)))
        .fold(0.0, f64::max)
        / SPEED_OF_SOUND
        * fs;
    let len = max_delay.ceil() as usize + SINC_HALF_WIDTH + 1;
    let mut taps = Array2::zeros((mics.len(), len));
    let w = SINC_HALF_WIDTH as i64;
    for (p, &m) in mics.iter().enumerate() {
        for im in &images {
            let r = distance(im.position, m);
            let tau = r / SPEED_OF_SOUND * fs;
            let amp = im.gain / (4.0 * PI * r);
            let k0 = tau.floor() as i64;
            for k in (k0 - w + 1).max(0)..=(k0 + w) {
                let v = windowed_sinc(k as f64 - tau);
                if v != 0.0 {
                    taps[[p, k as usize]] += amp * v;
                }
            }
        }
    }
    Ok(RoomImpulseResponse { taps, scene_hash: scene.hash() })
}

/// Full linear convolution through the FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex64> = v.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        b.resize(n, Complex64::default());
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    a.truncate(out_len);
    a.into_iter().map(|c| c.re / n as f64).collect()
}

/// Convolves a mono signal with each channel of `rir`, keeping the first
/// `x.len()` samples.
pub fn convolve_rir(x: &[f64], rir: &RoomImpulseResponse) -> Array2<f64> {
    let mut out = Array2::zeros((rir.mics(), x.len()));
    for p in 0..rir.mics() {
        let y = fft_convolve(x, rir.taps.row(p).as_slice().expect("row-major taps"));
        out.row_mut(p).assign(&ndarray::ArrayView1::from(&y[..x.len()]));
    }
    out
}

/// Signals rendered for one scene.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: TimeSignal,
    pub reverberant_clean: TimeSignal,
    /// Dry source, delayed by the integer direct-path lag of microphone 0.
    pub dry: TimeSignal,
    /// Reverberant noise after SNR scaling.
    pub noise: TimeSignal,
}

fn energy(v: ndarray::ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `y_p = s * h_p + g (n * g_p)`, with the gain `g` setting the channel-0
/// speech-to-noise ratio to `snr_db`. An infinite SNR drops the noise.
pub fn mix(
    speech: &TimeSignal,
    noise: &TimeSignal,
    rir_s: &RoomImpulseResponse,
    rir_n: &RoomImpulseResponse,
    snr_db: f64,
) -> Result<Mixture> {
    if speech.channels() != 1 || noise.channels() != 1 {
        return Err(Error::Signal("speech and noise must be mono".into()));
    }
    if rir_s.mics() != rir_n.mics() {
        return Err(Error::Shape("speech and noise responses differ in channel count".into()));
    }
    if snr_db.is_nan() {
        return Err(Error::Config("SNR is NaN".into()));
    }
    let s = speech.channel(0).to_vec();
    if s.iter().all(|&v| v == 0.0) {
        return Err(Error::Signal("speech has zero energy".into()));
    }
    let len = s.len();
    let reverb = convolve_rir(&s, rir_s);
    let e_s = energy(reverb.row(0));
    let mut noise_img = Array2::zeros((rir_n.mics(), len));
    if snr_db != f64::INFINITY {
        let n = noise.channel(0);
        if n.is_empty() || n.iter().all(|&v| v == 0.0) {
            return Err(Error::Signal("noise has zero energy".into()));
        }
        // Loop the noise to cover the speech.
        let tiled: Vec<f64> = (0..len).map(|i| n[i % n.len()]).collect();
        let raw = convolve_rir(&tiled, rir_n);
        let e_n = energy(raw.row(0));
        if e_s == 0.0 || e_n == 0.0 {
            return Err(Error::Signal("zero energy at the reference microphone".into()));
        }
        let gain = (e_s / (e_n * 10f64.powf(snr_db / 10.0))).sqrt();
        noise_img = raw * gain;
    }
    let lag = rir_s
        .taps
        .row(0)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map_or(0, |(i, _)| i);
    let mut dry = vec![0.0; len];
    if lag < len {
        dry[lag..].copy_from_slice(&s[..len - lag]);
    }
    let sr = speech.sample_rate;
    Ok(Mixture {
        mixture: TimeSignal::new(&reverb + &noise_img, sr),
        reverberant_clean: TimeSignal::new(reverb, sr),
        dry: TimeSignal::mono(dry, sr),
        noise: TimeSignal::new(noise_img, sr),
    })
}

/// Channel-0 signal-to-noise ratio in dB.
pub fn measured_snr_db(clean: &TimeSignal, mixture: &TimeSignal) -> f64 {
    let e_s = energy(clean.channel(0));
    let e_n: f64 = clean.channel(0).iter().zip(mixture.channel(0)).map(|(c, m)| (m - c).powi(2)).sum();
    10.0 * (e_s / e_n).log10()
}

/// Speech-like test signal: voiced harmonic syllables with gliding pitch
/// and formant shaping, fricative noise bursts, and short pauses.
pub fn synthetic_speech(len: usize, seed: u64) -> TimeSignal {
    let fs = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    let mut pos = rng.random_range(0..800usize);
    while pos < len {
        let dur = rng.random_range((0.08 * fs) as usize..(0.25 * fs) as usize);
        let end = (pos + dur).min(len);
        let amp = rng.random_range(0.3..1.0);
        if rng.random_bool(0.75) {
            let f0_start = rng.random_range(95.0..220.0);
            let f0_end = f0_start * rng.random_range(0.8..1.25);
            let formants = [rng.random_range(300.0..900.0), rng.random_range(900.0..2400.0), rng.random_range(2400.0..3400.0)];
            let mut phase = 0.0;
            for (i, v) in out[pos..end].iter_mut().enumerate() {
                let frac = i as f64 / dur as f64;
                let f0 = f0_start + (f0_end - f0_start) * frac;
                phase += 2.0 * PI * f0 / fs;
                let env = (PI * frac).sin().powf(0.6);
                let mut acc = 0.0;
                let mut h = 1;
                while h as f64 * f0 < 5000.0 {
                    let fh = h as f64 * f0;
                    let g: f64 = formants
                        .iter()
                        .map(|&fc| 1.0 / (1.0 + ((fh - fc) / 120.0).powi(2)))
                        .sum::<f64>()
                        + 0.02;
                    acc += g * (h as f64 * phase).sin() / h as f64;
                    h += 1;
                }
                *v += amp * env * acc;
            }
        } else {
            // Fricative: first-difference of white noise emphasizes highs.
            let mut prev = 0.0;
            for (i, v) in out[pos..end].iter_mut().enumerate() {
                let frac = i as f64 / dur as f64;
                let w: f64 = rng.random_range(-1.0..1.0);
                *v += 0.4 * amp * (PI * frac).sin() * (w - 0.7 * prev);
                prev = w;
            }
        }
        pos = end + rng.random_range((0.02 * fs) as usize..(0.12 * fs) as usize);
    }
    normalize_peak(&mut out, 0.5);
    TimeSignal::mono(out, SAMPLE_RATE)
}

/// Uniform white noise in `[-1, 1)`.
pub fn white_noise(len: usize, seed: u64) -> TimeSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TimeSignal::mono((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), SAMPLE_RATE)
}

/// Two-source test scene: synthetic speech at grid point 100 and a white
/// noise interferer at grid point 106, 0 dB, two seconds.
pub fn two_source_mixture(absorption: f64, seed: u64) -> Result<Mixture> {
    let grid = candidate_positions();
    let scene = SceneSpec { absorption: [absorption; 6], source: grid[100], noise: grid[106], ..SceneSpec::default() };
    let len = 2 * SAMPLE_RATE as usize;
    mix(
        &synthetic_speech(len, seed),
        &white_noise(len, seed + 1),
        &simulate_rir(&scene, Emitter::Source)?,
        &simulate_rir(&scene, Emitter::Noise)?,
        0.0,
    )
}

/// Low-pass coloured noise with slow amplitude modulation.
pub fn synthetic_noise(len: usize, seed: u64) -> TimeSignal {
    let fs = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pole = rng.random_range(0.3..0.9);
    let rate = rng.random_range(0.5..3.0);
    let mut state = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|i| {
            let w: f64 = rng.random_range(-1.0..1.0);
            state = pole * state + (1.0 - pole) * w;
            state * (1.0 + 0.5 * (2.0 * PI * rate * i as f64 / fs).sin())
        })
        .collect();
    normalize_peak(&mut out, 0.5);
    TimeSignal::mono(out, SAMPLE_RATE)
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

pub fn write_wav(path: &Path, x: &TimeSignal, format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: x.channels() as u16,
        sample_rate: x.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for i in 0..x.len() {
        for p in 0..x.channels() {
            let v = x.samples[[p, i]];
            match format {
                WavFormat::Pcm16 => w.write_sample((v.clamp(-1.0, 1.0) * 32767.0).round() as i16)?,
                WavFormat::Float32 => w.write_sample(v as f32)?,
            }
        }
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<TimeSignal> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let channels = spec.channels as usize;
    let flat: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1u64 << (bits - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => return Err(Error::Signal(format!("unsupported WAV format {fmt:?}/{bits}"))),
    };
    let len = flat.len() / channels.max(1);
    let samples = Array2::from_shape_fn((channels, len), |(p, i)| flat[i * channels + p]);
    Ok(TimeSignal::new(samples, spec.sample_rate))
}

/// Settings for [`build_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub snr_db_range: (f64, f64),
    pub absorption_range: (f64, f64),
    pub max_order: i32,
    /// Optional directories of mono WAVs; synthetic signals otherwise.
    pub speech_dir: Option<PathBuf>,
    pub noise_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 4,
            seed: 0,
            duration_s: 1.0,
            snr_db_range: (0.0, 10.0),
            absorption_range: (0.3, 0.7),
            max_order: 6,
            speech_dir: None,
            noise_dir: None,
        }
    }
}

/// One rendered utterance. Paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture: PathBuf,
    pub reverberant: PathBuf,
    pub dry: PathBuf,
    pub snr_db: f64,
    pub source: Point,
    pub noise: Point,
    pub absorption: f64,
    pub scene_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

fn fmt_point(p: Point) -> String {
    format!("{:.4},{:.4},{:.4}", p[0], p[1], p[2])
}

fn parse_point(s: &str) -> Result<Point> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Manifest(format!("{s}: {e}"))))
        .collect::<Result<_>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| Error::Manifest(format!("`{s}` is not a 3-D point")))
}

impl Manifest {
    /// Tab-separated `key=value` records, one utterance per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "id={}\tmixture={}\treverberant={}\tdry={}\tsnr_db={:.4}\tsource={}\tnoise={}\tabsorption={:.4}\tscene_seed={}",
                e.id,
                e.mixture.display(),
                e.reverberant.display(),
                e.dry.display(),
                e.snr_db,
                fmt_point(e.source),
                fmt_point(e.noise),
                e.absorption,
                e.scene_seed
            );
        }
        out
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut get = std::collections::HashMap::new();
            for field in line.split('\t') {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| Error::Manifest(format!("line {}: `{field}` is not key=value", n + 1)))?;
                get.insert(k, v);
            }
            let take = |k: &str| {
                get.get(k).copied().ok_or_else(|| Error::Manifest(format!("line {}: missing `{k}`", n + 1)))
            };
            let num = |k: &str| -> Result<f64> {
                take(k)?.parse().map_err(|e| Error::Manifest(format!("line {}: {k}: {e}", n + 1)))
            };
            entries.push(ManifestEntry {
                id: take("id")?.to_string(),
                mixture: take("mixture")?.into(),
                reverberant: take("reverberant")?.into(),
                dry: take("dry")?.into(),
                snr_db: num("snr_db")?,
                source: parse_point(take("source")?)?,
                noise: parse_point(take("noise")?)?,
                absorption: num("absorption")?,
                scene_seed: take("scene_seed")?
                    .parse()
                    .map_err(|e| Error::Manifest(format!("line {}: scene_seed: {e}", n + 1)))?,
            });
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Self::parse(&text, dir)
    }

    /// Reads (mixture, reverberant clean, dry) for entry `i`.
    pub fn load_example(&self, i: usize) -> Result<(TimeSignal, TimeSignal, TimeSignal)> {
        let e = self.entries.get(i).ok_or_else(|| Error::Manifest(format!("no entry {i}")))?;
        Ok((
            read_wav(&self.root.join(&e.mixture))?,
            read_wav(&self.root.join(&e.reverberant))?,
            read_wav(&self.root.join(&e.dry))?,
        ))
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Manifest(format!("no WAV files in {}", dir.display())));
    }
    Ok(v)
}

fn pick_signal(files: &Option<Vec<PathBuf>>, rng: &mut ChaCha8Rng, len: usize, synth: fn(usize, u64) -> TimeSignal) -> Result<TimeSignal> {
    let seed = rng.random::<u64>();
    match files {
        None => Ok(synth(len, seed)),
        Some(list) => {
            let x = read_wav(&list[seed as usize % list.len()])?;
            let ch = x.channel(0);
            if ch.is_empty() {
                return Err(Error::Signal("empty WAV".into()));
            }
            Ok(TimeSignal::mono((0..len).map(|i| ch[i % ch.len()]).collect(), x.sample_rate))
        }
    }
}

/// Renders `config.count` scenes into `out_dir` and writes the manifest.
///
/// Each utterance draws from its own RNG stream, so entry `i` does not
/// depend on how many entries are requested.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    if config.duration_s * SAMPLE_RATE as f64 <= 512.0 {
        return Err(Error::Config("utterances must be longer than one STFT frame".into()));
    }
    fs::create_dir_all(out_dir)?;
    let speech_files = config.speech_dir.as_deref().map(wav_files).transpose()?;
    let noise_files = config.noise_dir.as_deref().map(wav_files).transpose()?;
    let mut grid = candidate_positions();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    grid.shuffle(&mut order_rng);
    if config.count > grid.len() / 2 {
        return Err(Error::Config(format!("at most {} utterances have distinct positions", grid.len() / 2)));
    }
    let len = (config.duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut entries = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let absorption = rng.random_range(config.absorption_range.0..=config.absorption_range.1);
        let snr_db = rng.random_range(config.snr_db_range.0..=config.snr_db_range.1);
        let scene = SceneSpec {
            absorption: [absorption; 6],
            source: grid[2 * i],
            noise: grid[2 * i + 1],
            snr_db,
            max_order: config.max_order,
            seed: rng.random(),
            ..SceneSpec::default()
        };
        let speech = pick_signal(&speech_files, &mut rng, len, synthetic_speech)?;
        let noise = pick_signal(&noise_files, &mut rng, len, synthetic_noise)?;
        let m = mix(&speech, &noise, &simulate_rir(&scene, Emitter::Source)?, &simulate_rir(&scene, Emitter::Noise)?, snr_db)?;
        let id = format!("utt{i:04}");
        let names = [format!("{id}_mix.wav"), format!("{id}_reverb.wav"), format!("{id}_dry.wav")];
        for (name, sig) in names.iter().zip([&m.mixture, &m.reverberant_clean, &m.dry]) {
            write_wav(&out_dir.join(name), sig, WavFormat::Float32)?;
        }
        let [mixture, reverberant, dry] = names.map(PathBuf::from);
        entries.push(ManifestEntry {
            id,
            mixture,
            reverberant,
            dry,
            snr_db,
            source: scene.source,
            noise: scene.noise,
            absorption,
            scene_seed: scene.seed,
        });
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), entries };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// Removes the leading `lag` samples so `x` lines up with a dry reference.
pub fn advance(x: &TimeSignal, lag: usize) -> TimeSignal {
    let len = x.len();
    let mut out = Array2::zeros((x.channels(), len));
    if lag < len {
        out.slice_mut(s![.., ..len - lag]).assign(&x.samples.slice(s![.., lag..]));
    }
    TimeSignal::new(out, x.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_252_points_inside_the_room() {
        let scene = SceneSpec::default();
        let g = candidate_positions();
        assert_eq!(g.len(), 252);
        assert!(g.iter().all(|&p| scene.inside(p)));
    }

    #[test]
    fn tetrahedron_sits_on_the_radius() {
        let scene = SceneSpec::default();
        let mics = scene.mic_positions();
        assert_eq!(mics.len(), 8);
        for (p, m) in mics.iter().enumerate() {
            let c = scene.array_centers[p / 4];
            assert!((distance(*m, c) - 0.032).abs() < 1e-12);
        }
    }

    #[test]
    fn sinc_kernel_is_exact_at_integers() {
        assert_eq!(windowed_sinc(0.0), 1.0);
        assert!(windowed_sinc(3.0).abs() < 1e-15);
        assert_eq!(windowed_sinc(8.0), 0.0);
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
