//! The two-stage enhancer: a multi-output CRN estimating one complex mask
//! per microphone, a frequency-wise recurrent spatial filter that folds
//! the masked channels into one, and a single-output CRN mapping the
//! filtered signal plus the reference microphone to the dry source.
//!
//! Graph-level functions work on complex tensors `[2, B, P, T, F]` so they
//! can be trained; the [`TwoStageModel`] methods wrap them for inference
//! on [`Spectrogram`]s.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorgrad::{init_uniform, Graph, ParamStore, Real, Slot, Tensor, Var};

use crate::crn::{crn_forward, init_crn, init_lstm, Binder, CrnConfig, DecoderMode};
use crate::dsp::{apply_mask, istft, stft, ComplexMask, Spectrogram, StftConfig, TimeSignal, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const STAGE1: &str = "stage1.";
pub const SPATIAL: &str = "spatial.";
pub const STAGE2: &str = "stage2.";
pub const SPATIAL_LAYERS: usize = 2;

/// Architecture of a [`TwoStageModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Microphones `P`.
    pub mics: usize,
    pub width_num: usize,
    pub width_den: usize,
    /// Hidden units per direction of the spatial-filter LSTM.
    pub spatial_hidden: usize,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mics: 8,
            width_num: 1,
            width_den: 1,
            spatial_hidden: 64,
            stft: StftConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn stage1(&self) -> CrnConfig {
        CrnConfig::new(2 * self.mics, 2 * self.mics, self.width_num, self.width_den, DecoderMode::Mask)
    }

    pub fn stage2(&self) -> CrnConfig {
        CrnConfig::new(4, 2, self.width_num, self.width_den, DecoderMode::Map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mics == 0 || self.spatial_hidden == 0 {
            return Err(Error::Config("microphone count and spatial hidden size must be positive".into()));
        }
        self.stft.validate()?;
        if self.stft.bins() != 256 {
            return Err(Error::Config(format!("the CRN needs 256 bins, STFT gives {}", self.stft.bins())));
        }
        self.stage1().validate()?;
        self.stage2().validate()
    }
}

/// Per-channel Stage-I estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOneOutput {
    pub spec: Spectrogram,
}

impl StageOneOutput {
    /// Stage-I output for a given mask, bypassing the network.
    pub fn from_mask(y: &Spectrogram, mask: &ComplexMask) -> Result<Self> {
        Ok(Self { spec: apply_mask(y, mask)? })
    }
}

/// `[2, B, P, T, F]` -> `[B, 2P, T, F]` with all real parts first.
pub fn complex_to_channels<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[1, 0, 2, 3, 4])?;
    Ok(g.reshape(p, &[s[1], 2 * s[2], s[3], s[4]])?)
}

/// Stage I: returns `(mask, masked)` as `[2, B, P, T, F]` tensors.
pub fn stage1_graph<T: Real>(g: &mut Graph<T>, b: &mut Binder<'_, T>, cfg: &ModelConfig, y: Var) -> Result<(Var, Var)> {
    let input = complex_to_channels(g, y)?;
    let (re, im) = crn_forward(g, b, STAGE1, &cfg.stage1(), input, None)?;
    let mask = g.stack(&[re, im])?;
    let est = g.complex_mul(mask, y)?;
    Ok((mask, est))
}

/// Spatial filter: `[2, B, P, T, F]` -> `[2, B, 1, T, F]`, the same layer
/// norm, LSTM and projection applied to every frequency band.
pub fn spatial_graph<T: Real>(g: &mut Graph<T>, b: &mut Binder<'_, T>, s1: Var) -> Result<Var> {
    let [_, batch, p, frames, bins] = g.shape(s1)[..] else {
        return Err(Error::Shape(format!("spatial filter input {:?}", g.shape(s1))));
    };
    // [2, B, P, T, F] -> [B, F, T, 2, P] -> [B F, T, 2P]
    let x = g.permute(s1, &[1, 4, 3, 0, 2])?;
    let x = g.reshape(x, &[batch * bins, frames, 2 * p])?;
    let gamma = b.var(g, &format!("{SPATIAL}ln.gamma"))?;
    let beta = b.var(g, &format!("{SPATIAL}ln.beta"))?;
    let x = g.layernorm(x, gamma, beta)?;
    let layers = b.lstm(g, &format!("{SPATIAL}lstm"), SPATIAL_LAYERS)?;
    let x = g.lstm_seq(x, &layers)?;
    let w = b.var(g, &format!("{SPATIAL}fc.w"))?;
    let bias = b.var(g, &format!("{SPATIAL}fc.b"))?;
    let x = g.linear(x, w, bias)?;
    let x = g.reshape(x, &[batch, bins, frames, 2])?;
    let x = g.permute(x, &[3, 0, 2, 1])?;
    Ok(g.reshape(x, &[2, batch, 1, frames, bins])?)
}

/// Stage II: filtered signal and reference channel, both `[2, B, 1, T, F]`,
/// to the dry estimate `[2, B, 1, T, F]`.
pub fn stage2_graph<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    cfg: &ModelConfig,
    filtered: Var,
    y0: Var,
) -> Result<Var> {
    let both = g.concat(&[filtered, y0], 2)?;
    let input = complex_to_channels(g, both)?;
    let (re, im) = crn_forward(g, b, STAGE2, &cfg.stage2(), input, None)?;
    Ok(g.stack(&[re, im])?)
}

/// Reference microphone of a `[2, B, P, T, F]` tensor.
pub fn channel0<T: Real>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    Ok(g.slice(y, 2, 0, 1)?)
}

/// Parameters and architecture of the full system.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> TwoStageModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_crn(&config.stage1(), STAGE1, &mut rng, &mut params)?;
        let (p2, h) = (2 * config.mics, config.spatial_hidden);
        params.insert(format!("{SPATIAL}ln.gamma"), Slot::Param, Tensor::full(&[p2], T::one()));
        params.insert(format!("{SPATIAL}ln.beta"), Slot::Param, Tensor::zeros(&[p2]));
        init_lstm(&mut params, &mut rng, &format!("{SPATIAL}lstm"), p2, h, SPATIAL_LAYERS);
        params.insert(format!("{SPATIAL}fc.w"), Slot::Param, init_uniform(&mut rng, &[2, 2 * h], 2 * h));
        params.insert(format!("{SPATIAL}fc.b"), Slot::Param, init_uniform(&mut rng, &[2], 2 * h));
        init_crn(&config.stage2(), STAGE2, &mut rng, &mut params)?;
        Ok(Self { config, params })
    }

    /// Zeroes every additive offset: conv, LSTM and projection biases and
    /// normalization shifts.
    pub fn zero_biases(&mut self) {
        for (name, _, t) in self.params.iter_mut() {
            if name.ends_with(".b") || name.ends_with(".bias") || name.ends_with(".beta") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Makes Stage I emit the unit mask `1 + 0i` for any input.
    pub fn force_identity_mask(&mut self) -> Result<()> {
        let last = ["dec_re5", "dec_im5"];
        for (k, branch) in last.iter().enumerate() {
            let w = self.params.get_mut(&format!("{STAGE1}{branch}.w"))?;
            w.data_mut().iter_mut().for_each(|v| *v = T::zero());
            let b = self.params.get_mut(&format!("{STAGE1}{branch}.b"))?;
            let fill = if k == 0 { T::one() } else { T::zero() };
            b.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        Ok(())
    }

    fn check_channels(&self, spec: &Spectrogram) -> Result<()> {
        if spec.channels() != self.config.mics {
            return Err(Error::Shape(format!(
                "model expects {} channels, got {}",
                self.config.mics,
                spec.channels()
            )));
        }
        Ok(())
    }

    pub fn stage1_mimo(&self, y: &Spectrogram) -> Result<StageOneOutput> {
        self.check_channels(y)?;
        let mut g = Graph::new();
        let mut b = Binder::eval(&self.params);
        let yv = g.constant(y.to_tensor());
        let (_, est) = stage1_graph(&mut g, &mut b, &self.config, yv)?;
        Ok(StageOneOutput { spec: Spectrogram::from_tensor(g.value(est), 0, y.config)? })
    }

    pub fn spatial_filter(&self, s1: &StageOneOutput) -> Result<Spectrogram> {
        self.check_channels(&s1.spec)?;
        let mut g = Graph::new();
        let mut b = Binder::eval(&self.params);
        let x = g.constant(s1.spec.to_tensor());
        let out = spatial_graph(&mut g, &mut b, x)?;
        Spectrogram::from_tensor(g.value(out), 0, s1.spec.config)
    }

    pub fn stage2_miso(&self, filtered: &Spectrogram, y0: &Spectrogram) -> Result<Spectrogram> {
        if filtered.channels() != 1 || y0.channels() != 1 || filtered.dim() != y0.dim() {
            return Err(Error::Shape(format!(
                "stage II takes two single-channel spectrograms, got {:?} and {:?}",
                filtered.dim(),
                y0.dim()
            )));
        }
        let mut g = Graph::new();
        let mut b = Binder::eval(&self.params);
        let f = g.constant(filtered.to_tensor());
        let r = g.constant(y0.to_tensor());
        let out = stage2_graph(&mut g, &mut b, &self.config, f, r)?;
        Spectrogram::from_tensor(g.value(out), 0, filtered.config)
    }

    /// Runs all three stages on a mixture spectrogram in one graph.
    pub fn enhance_spectrogram(&self, y: &Spectrogram) -> Result<Spectrogram> {
        self.check_channels(y)?;
        let mut g = Graph::new();
        let mut b = Binder::eval(&self.params);
        let yv = g.constant(y.to_tensor());
        let (_, s1) = stage1_graph(&mut g, &mut b, &self.config, yv)?;
        let filtered = spatial_graph(&mut g, &mut b, s1)?;
        let y0 = channel0(&mut g, yv)?;
        let out = stage2_graph(&mut g, &mut b, &self.config, filtered, y0)?;
        Spectrogram::from_tensor(g.value(out), 0, y.config)
    }

    /// Multichannel waveform in, single-channel estimate of the same length out.
    pub fn enhance(&self, x: &TimeSignal) -> Result<TimeSignal> {
        if x.sample_rate != SAMPLE_RATE {
            return Err(Error::Signal(format!("expected {SAMPLE_RATE} Hz, got {}", x.sample_rate)));
        }
        if x.channels() != self.config.mics {
            return Err(Error::Shape(format!(
                "model expects {} channels, got {}",
                self.config.mics,
                x.channels()
            )));
        }
        let y = stft(x, &self.config.stft)?;
        let s = self.enhance_spectrogram(&y)?;
        istft(&s, x.len())
    }
}
