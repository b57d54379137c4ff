//! Training: `key = value` configuration, AdamW, the step schedule, the
//! stage-wise training loop and a little-endian checkpoint format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgrad::{Graph, ParamStore, Real, Slot, Tensor, Var};

use crate::baselines::{filtersum_graph, FilterSumModel, FILTERSUM};
use crate::crn::{update_running_stats, Binder};
use crate::dsp::{stack_complex, stft, Spectrogram, StftConfig, TimeSignal};
use crate::error::{Error, Result};
use crate::loss::{total_loss_graph, LossWeights};
use crate::pipeline::{
    channel0, spatial_graph, stage1_graph, stage2_graph, ModelConfig, TwoStageModel, SPATIAL, STAGE1, STAGE2,
};
use crate::simkit::{DatasetConfig, Manifest};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key} = {v}: {e}")))
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key} = {v}: expected `low, high`")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

/// `"1/8"` or `"1"` to `(num, den)`.
pub fn parse_width(v: &str) -> Result<(usize, usize)> {
    let (n, d) = v.split_once('/').unwrap_or((v, "1"));
    let n: usize = parse_num("width", n.trim())?;
    let d: usize = parse_num("width", d.trim())?;
    if n == 0 || d == 0 {
        return Err(Error::Config(format!("width {v} must be positive")));
    }
    Ok((n, d))
}

/// Applies one `key = value` setting to a dataset configuration.
pub fn set_dataset_key(cfg: &mut DatasetConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "count" => cfg.count = parse_num(key, v)?,
        "seed" => cfg.seed = parse_num(key, v)?,
        "duration_s" => cfg.duration_s = parse_num(key, v)?,
        "snr_db_range" => cfg.snr_db_range = parse_pair(key, v)?,
        "absorption_range" => cfg.absorption_range = parse_pair(key, v)?,
        "max_order" => cfg.max_order = parse_num(key, v)?,
        "speech_dir" => cfg.speech_dir = Some(v.into()),
        "noise_dir" => cfg.noise_dir = Some(v.into()),
        _ => return Err(Error::UnknownKey(key.to_string())),
    }
    Ok(())
}

pub fn dataset_config_to_kv(cfg: &DatasetConfig) -> String {
    let mut s = format!(
        "count = {}\nseed = {}\nduration_s = {}\nsnr_db_range = {}, {}\nabsorption_range = {}, {}\nmax_order = {}\n",
        cfg.count,
        cfg.seed,
        cfg.duration_s,
        cfg.snr_db_range.0,
        cfg.snr_db_range.1,
        cfg.absorption_range.0,
        cfg.absorption_range.1,
        cfg.max_order
    );
    for (k, v) in [("speech_dir", &cfg.speech_dir), ("noise_dir", &cfg.noise_dir)] {
        if let Some(d) = v {
            let _ = writeln!(s, "{k} = {}", d.display());
        }
    }
    s
}

pub fn dataset_config_from_kv(text: &str) -> Result<DatasetConfig> {
    let mut cfg = DatasetConfig::default();
    for (k, v) in parse_kv(text)? {
        set_dataset_key(&mut cfg, &k, &v)?;
    }
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Multi-output masking network against reverberant clean targets.
    Stage1,
    /// Spatial filter and single-output network with Stage I frozen.
    Stage2,
    /// Everything against the dry target.
    Joint,
    /// The neural filter-and-sum baseline.
    FilterSum,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Joint => "joint",
            Stage::FilterSum => "filtersum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "joint" => Ok(Stage::Joint),
            "filtersum" => Ok(Stage::FilterSum),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }

    fn trainable(self) -> &'static [&'static str] {
        match self {
            Stage::Stage1 => &[STAGE1],
            Stage::Stage2 => &[SPATIAL, STAGE2],
            Stage::Joint => &[STAGE1, SPATIAL, STAGE2],
            Stage::FilterSum => &[FILTERSUM],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Iterations between learning-rate halvings.
    pub lr_halving_interval: u64,
    pub weight_decay: f64,
    pub max_iters: u64,
    pub seed: u64,
    pub stage: Stage,
    pub mics: usize,
    pub width_num: usize,
    pub width_den: usize,
    pub spatial_hidden: usize,
    pub alpha: f64,
    /// Save every this many iterations; 0 saves only at the end.
    pub checkpoint_interval: u64,
}

impl TrainConfig {
    /// Full-scale reference settings.
    pub fn reference() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            lr_halving_interval: 50_000,
            weight_decay: 0.01,
            max_iters: 200_000,
            seed: 0,
            stage: Stage::Stage1,
            mics: 8,
            width_num: 1,
            width_den: 1,
            spatial_hidden: 64,
            alpha: 2.0,
            checkpoint_interval: 10_000,
        }
    }

    /// Settings that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            batch_size: 2,
            lr_halving_interval: 200,
            max_iters: 300,
            width_den: 8,
            spatial_hidden: 16,
            checkpoint_interval: 0,
            ..Self::reference()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mics: self.mics,
            width_num: self.width_num,
            width_den: self.width_den,
            spatial_hidden: self.spatial_hidden,
            stft: StftConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_halving_interval == 0 {
            return Err(Error::Config("lr_halving_interval must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.model_config().validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_halving_interval" => self.lr_halving_interval = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "max_iters" => self.max_iters = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "stage" => self.stage = Stage::parse(v)?,
            "mics" => self.mics = parse_num(key, v)?,
            "width" => (self.width_num, self.width_den) = parse_width(v)?,
            "spatial_hidden" => self.spatial_hidden = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_num(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Desk defaults overridden by the settings in `text`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "batch_size = {}\nlr = {}\nlr_halving_interval = {}\nweight_decay = {}\nmax_iters = {}\nseed = {}\nstage = {}\n\
             mics = {}\nwidth = {}/{}\nspatial_hidden = {}\nalpha = {}\ncheckpoint_interval = {}\n",
            self.batch_size,
            self.lr,
            self.lr_halving_interval,
            self.weight_decay,
            self.max_iters,
            self.seed,
            self.stage.as_str(),
            self.mics,
            self.width_num,
            self.width_den,
            self.spatial_hidden,
            self.alpha,
            self.checkpoint_interval
        )
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `lr0 * 0.5^floor(iteration / interval)`.
pub fn lr_schedule(iteration: u64, config: &TrainConfig) -> f64 {
    let halvings = (iteration / config.lr_halving_interval.max(1)).min(1 << 20) as i32;
    config.lr * 0.5f64.powi(halvings)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Moments are kept per tensor name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: IndexMap::new() }
    }

    /// One update. A non-finite gradient aborts the step and leaves both
    /// the parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                log::error!("non-finite gradient for {name} at step {}; update skipped", self.step + 1);
                return Err(Error::Numerical(format!("non-finite gradient for {name}")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for {name} {:?}", g.shape(), p.shape())));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let decay = T::of(1.0 - lr * c.weight_decay);
        let eps = T::of(c.eps);
        let one = T::one();
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *w = *w * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// STFTs of every training utterance.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub mixture: Vec<Spectrogram>,
    pub reverberant: Vec<Spectrogram>,
    pub dry: Vec<Spectrogram>,
}

impl TrainingSet {
    /// From (mixture, reverberant clean, dry) waveforms of equal length.
    pub fn from_signals(examples: &[(TimeSignal, TimeSignal, TimeSignal)], config: &StftConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Manifest("no training utterances".into()));
        }
        let len = examples[0].0.len();
        let mut set = Self { mixture: Vec::new(), reverberant: Vec::new(), dry: Vec::new() };
        for (i, (m, r, d)) in examples.iter().enumerate() {
            if m.len() != len || r.len() != len || d.len() != len {
                return Err(Error::Manifest(format!("utterance {i} length differs from {len} samples")));
            }
            if d.channels() != 1 || r.channels() != m.channels() {
                return Err(Error::Manifest(format!("utterance {i} has inconsistent channel counts")));
            }
            set.mixture.push(stft(m, config)?);
            set.reverberant.push(stft(r, config)?);
            set.dry.push(stft(d, config)?);
        }
        Ok(set)
    }

    pub fn from_manifest(manifest: &Manifest, config: &StftConfig) -> Result<Self> {
        let examples = (0..manifest.entries.len()).map(|i| manifest.load_example(i)).collect::<Result<Vec<_>>>()?;
        Self::from_signals(&examples, config)
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let p = self.mixture[0].channels();
        if p != cfg.mics {
            return Err(Error::Manifest(format!("data has {p} channels, model expects {}", cfg.mics)));
        }
        if self.mixture[0].config != cfg.stft {
            return Err(Error::Manifest("data and model STFT settings differ".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    TwoStage(TwoStageModel<f32>),
    FilterSum(FilterSumModel<f32>),
}

impl Model {
    pub fn for_stage(stage: Stage, config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(match stage {
            Stage::FilterSum => Model::FilterSum(FilterSumModel::new(config, seed)?),
            _ => Model::TwoStage(TwoStageModel::new(config, seed)?),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::TwoStage(_) => "two_stage",
            Model::FilterSum(_) => "filtersum",
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::TwoStage(m) => &m.config,
            Model::FilterSum(m) => &m.config,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        match self {
            Model::TwoStage(m) => &m.params,
            Model::FilterSum(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            Model::TwoStage(m) => &mut m.params,
            Model::FilterSum(m) => &mut m.params,
        }
    }

    /// Single-channel enhanced spectrogram.
    pub fn enhance_spectrogram(&self, y: &Spectrogram) -> Result<Spectrogram> {
        match self {
            Model::TwoStage(m) => m.enhance_spectrogram(y),
            Model::FilterSum(m) => m.filter_and_sum_nn(y),
        }
    }

    pub fn enhance(&self, x: &TimeSignal) -> Result<TimeSignal> {
        match self {
            Model::TwoStage(m) => m.enhance(x),
            Model::FilterSum(m) => {
                let y = stft(x, &m.config.stft)?;
                crate::dsp::istft(&m.filter_and_sum_nn(&y)?, x.len())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
}

/// `iter,lr,loss` records with a header line.
pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("iter,lr,loss\n");
    for r in curve {
        let _ = writeln!(s, "{},{},{}", r.iter, r.lr, r.loss);
    }
    s
}

/// Drives stage-wise training of one model.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW<f32>,
    /// Iterations completed so far.
    pub iteration: u64,
    pub curve: Vec<LossRecord>,
    stage1_cache: Option<Vec<Spectrogram>>,
}

impl Trainer {
    /// Fresh model initialized from the config seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::for_stage(config.stage, config.model_config(), config.seed)?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let fits = matches!(
            (&model, config.stage),
            (Model::FilterSum(_), Stage::FilterSum) | (Model::TwoStage(_), Stage::Stage1 | Stage::Stage2 | Stage::Joint)
        );
        if !fits {
            return Err(Error::Config(format!("stage {} cannot train a {} model", config.stage.as_str(), model.kind())));
        }
        let optimizer = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() });
        Ok(Self { config, model, optimizer, iteration: 0, curve: Vec::new(), stage1_cache: None })
    }

    /// Continues from a checkpoint. Optimizer state is restored only when
    /// the checkpoint was written during the same stage.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        if *ckpt.model.config() != config.model_config() {
            return Err(Error::Config(format!(
                "checkpoint architecture {:?} differs from the configured {:?}",
                ckpt.model.config(),
                config.model_config()
            )));
        }
        let same_stage = ckpt.stage == Some(config.stage);
        let mut t = Self::with_model(config, ckpt.model)?;
        if same_stage {
            t.iteration = ckpt.iteration;
            if let Some(opt) = ckpt.optimizer {
                t.optimizer = opt;
            }
        }
        Ok(t)
    }

    /// Utterances for iteration `iter`, a pure function of seed and `iter`.
    pub fn batch_indices(&self, iter: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iter);
        (0..self.config.batch_size).map(|_| rng.random_range(0..n)).collect()
    }

    fn stage1_outputs(&mut self, data: &TrainingSet) -> Result<&[Spectrogram]> {
        if self.stage1_cache.is_none() {
            let Model::TwoStage(m) = &self.model else {
                return Err(Error::Config("Stage I outputs need a two-stage model".into()));
            };
            let cache = data.mixture.iter().map(|y| m.stage1_mimo(y).map(|s| s.spec)).collect::<Result<Vec<_>>>()?;
            self.stage1_cache = Some(cache);
        }
        Ok(self.stage1_cache.as_deref().unwrap_or(&[]))
    }

    /// Training loss of iteration `iter` and the gradients, without
    /// touching the model.
    fn forward_backward(
        &mut self,
        data: &TrainingSet,
        iter: u64,
    ) -> Result<(f64, Vec<(String, Tensor<f32>)>, Vec<(String, tensorgrad::BatchStats<f32>)>)> {
        data.check(self.model.config())?;
        let idx = self.batch_indices(iter, data.len());
        let pick = |v: &[Spectrogram]| -> Tensor<f32> { stack_complex(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>()) };
        let stage = self.config.stage;
        let weights = LossWeights { alpha: self.config.alpha };
        let cached = if stage == Stage::Stage2 { Some(pick(self.stage1_outputs(data)?)) } else { None };
        let cfg = *self.model.config();
        let mut g = Graph::<f32>::new();
        let mut b = Binder::train(self.model.params(), stage.trainable());
        let y = g.constant(pick(&data.mixture));
        let (est, target) = match stage {
            Stage::Stage1 => (stage1_graph(&mut g, &mut b, &cfg, y)?.1, pick(&data.reverberant)),
            Stage::Stage2 | Stage::Joint => {
                let s1 = match cached {
                    Some(t) => g.constant(t),
                    None => stage1_graph(&mut g, &mut b, &cfg, y)?.1,
                };
                let filtered = spatial_graph(&mut g, &mut b, s1)?;
                let y0 = channel0(&mut g, y)?;
                (stage2_graph(&mut g, &mut b, &cfg, filtered, y0)?, pick(&data.dry))
            }
            Stage::FilterSum => (filtersum_graph(&mut g, &mut b, &cfg, y)?, pick(&data.dry)),
        };
        let tgt = g.constant(target);
        let loss = total_loss_graph(&mut g, est, tgt, weights)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value} at iteration {iter}")));
        }
        g.backward(loss)?;
        let vars: Vec<(String, Var)> = b.trainable_vars();
        let grads = vars.into_iter().filter_map(|(n, v)| g.grad(v).map(|t| (n, t))).collect();
        Ok((value, grads, b.take_stats()))
    }

    /// Loss at the current iteration without updating anything.
    pub fn evaluate_loss(&mut self, data: &TrainingSet) -> Result<f64> {
        Ok(self.forward_backward(data, self.iteration)?.0)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn step(&mut self, data: &TrainingSet) -> Result<f64> {
        let iter = self.iteration;
        let (loss, grads, stats) = self.forward_backward(data, iter)?;
        let lr = lr_schedule(iter, &self.config);
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;
        update_running_stats(self.model.params_mut(), &stats)?;
        self.curve.push(LossRecord { iter, lr, loss });
        self.iteration += 1;
        Ok(loss)
    }

    /// Trains until `max_iters`, calling `save` every checkpoint interval
    /// and once at the end. Steps with non-finite gradients are skipped.
    pub fn run(&mut self, data: &TrainingSet, mut save: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.max_iters {
            match self.step(data) {
                Ok(loss) => log::debug!("iter {} loss {loss:.6}", self.iteration),
                Err(Error::Numerical(msg)) => {
                    log::warn!("iteration {} skipped: {msg}", self.iteration);
                    self.iteration += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
            let every = self.config.checkpoint_interval;
            if every > 0 && self.iteration % every == 0 && self.iteration < self.config.max_iters {
                save(self)?;
            }
        }
        save(self)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            stage: Some(self.config.stage),
            iteration: self.iteration,
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

const MAGIC: &[u8; 8] = b"TWOSTAGE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model weights plus, optionally, the training state needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub stage: Option<Stage>,
    pub iteration: u64,
    pub optimizer: Option<AdamW<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    fn header(&self) -> String {
        let c = self.model.config();
        let mut h = IndexMap::new();
        h.insert("kind", self.model.kind().to_string());
        h.insert("mics", c.mics.to_string());
        h.insert("width", format!("{}/{}", c.width_num, c.width_den));
        h.insert("spatial_hidden", c.spatial_hidden.to_string());
        h.insert("stft_frame", c.stft.frame.to_string());
        h.insert("stft_hop", c.stft.hop.to_string());
        h.insert("stft_fft", c.stft.fft.to_string());
        let crns = match &self.model {
            Model::TwoStage(_) => vec![("stage1", c.stage1()), ("stage2", c.stage2())],
            Model::FilterSum(_) => vec![("filtersum", crate::baselines::filtersum_crn(c))],
        };
        for (name, crn) in crns {
            h.insert(
                name,
                format!(
                    "c_in={} c_out={} width={} freq_bins={} decoder={} dual={}",
                    crn.c_in,
                    crn.c_out,
                    crn.width_label(),
                    crn.freq_bins,
                    crn.decoder_mode.as_str(),
                    crn.dual_decoder
                ),
            );
        }
        h.insert("stage", self.stage.map_or("none", Stage::as_str).to_string());
        h.insert("iteration", self.iteration.to_string());
        if let Some(o) = &self.optimizer {
            h.insert("adamw_beta1", o.config.beta1.to_string());
            h.insert("adamw_beta2", o.config.beta2.to_string());
            h.insert("adamw_eps", o.config.eps.to_string());
            h.insert("adamw_weight_decay", o.config.weight_decay.to_string());
            h.insert("adamw_step", o.step.to_string());
        }
        h.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.header());
        let params = self.model.params();
        put_u32(&mut out, params.len() as u32);
        for (name, slot, t) in params.iter() {
            put_str(&mut out, name);
            out.push(match slot {
                Slot::Param => 0,
                Slot::Buffer => 1,
            });
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                put_u32(&mut out, o.moments.len() as u32);
                for (name, (m, v)) in &o.moments {
                    put_str(&mut out, name);
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header: IndexMap<String, String> = parse_kv(&r.string()?)?.into_iter().collect();
        let get = |k: &str| header.get(k).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|e| Error::Checkpoint(format!("{k}: {e}"))) };
        let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|e| Error::Checkpoint(format!("{k}: {e}"))) };
        let (width_num, width_den) = parse_width(get("width")?)?;
        let config = ModelConfig {
            mics: num("mics")? as usize,
            width_num,
            width_den,
            spatial_hidden: num("spatial_hidden")? as usize,
            stft: StftConfig {
                frame: num("stft_frame")? as usize,
                hop: num("stft_hop")? as usize,
                fft: num("stft_fft")? as usize,
            },
        };
        let mut model = match get("kind")? {
            "two_stage" => Model::TwoStage(TwoStageModel::new(config, 0)?),
            "filtersum" => Model::FilterSum(FilterSumModel::new(config, 0)?),
            k => return Err(Error::Checkpoint(format!("unknown model kind `{k}`"))),
        };
        let stage = match get("stage")? {
            "none" => None,
            s => Some(Stage::parse(s)?),
        };
        let iteration = num("iteration")?;

        let expected = model.params().clone();
        let n = r.u32()? as usize;
        if n != expected.len() {
            return Err(Error::Checkpoint(format!("{n} tensors, architecture has {}", expected.len())));
        }
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let slot = match r.u8()? {
                0 => Slot::Param,
                1 => Slot::Buffer,
                s => return Err(Error::Checkpoint(format!("bad slot {s} for {name}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f32s()?;
            let want = expected.get(&name).map_err(|_| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if want.shape() != shape.as_slice() || expected.slot(&name) != Some(slot) {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, architecture {:?}", want.shape())));
            }
            params.insert(name, slot, Tensor::new(&shape, data)?);
        }
        *model.params_mut() = params;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut o = AdamW::new(AdamWConfig {
                    beta1: float("adamw_beta1")?,
                    beta2: float("adamw_beta2")?,
                    eps: float("adamw_eps")?,
                    weight_decay: float("adamw_weight_decay")?,
                });
                o.step = num("adamw_step")?;
                let k = r.u32()? as usize;
                for _ in 0..k {
                    let name = r.string()?;
                    let (m, v) = (r.f32s()?, r.f32s()?);
                    o.moments.insert(name, (m, v));
                }
                Some(o)
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { model, stage, iteration, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
