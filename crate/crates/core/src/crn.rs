//! Convolutional recurrent network: six strided conv blocks, a two-layer
//! bidirectional LSTM over flattened frequency features, and mirrored
//! deconv decoders with skip connections.

use std::collections::HashMap;

use rand::Rng;
use tensorgrad::{
    init_uniform, BatchNormMode, BatchStats, Graph, LayerSpec, LstmVars, ParamStore, Real, Slot, Tensor, Var,
    BN_MOMENTUM, PRELU_INIT,
};

use crate::error::{Error, Result};

/// Encoder output channels at full width.
pub const LADDER: [usize; 6] = [16, 32, 64, 128, 256, 256];
pub const LSTM_LAYERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    /// Outputs multiply the input spectrogram.
    Mask,
    /// Outputs are the spectrogram itself.
    Map,
}

impl DecoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::Mask => "mask",
            DecoderMode::Map => "map",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(DecoderMode::Mask),
            "map" => Ok(DecoderMode::Map),
            _ => Err(Error::Config(format!("decoder mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrnConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Channel ladder multiplier `width_num / width_den`.
    pub width_num: usize,
    pub width_den: usize,
    pub freq_bins: usize,
    pub decoder_mode: DecoderMode,
    /// Separate real and imaginary decoders, each emitting `c_out / 2`.
    pub dual_decoder: bool,
}

impl CrnConfig {
    pub fn new(c_in: usize, c_out: usize, width_num: usize, width_den: usize, decoder_mode: DecoderMode) -> Self {
        Self {
            c_in,
            c_out,
            width_num,
            width_den,
            freq_bins: 256,
            decoder_mode,
            dual_decoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_in % 2 != 0 || self.c_out == 0 || self.c_out % 2 != 0 {
            return Err(Error::Config(format!(
                "CRN channels must be positive and even, got {} -> {}",
                self.c_in, self.c_out
            )));
        }
        if self.width_num == 0 || self.width_den == 0 {
            return Err(Error::Config("width scale must be positive".into()));
        }
        for c in &LADDER {
            if (c * self.width_num) % self.width_den != 0 {
                return Err(Error::Config(format!(
                    "width {}/{} does not divide the channel ladder",
                    self.width_num, self.width_den
                )));
            }
        }
        if self.freq_bins == 0 || self.freq_bins % 64 != 0 {
            return Err(Error::Config(format!("{} bins is not a multiple of 64", self.freq_bins)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        LADDER[level] * self.width_num / self.width_den
    }

    /// Hidden units per direction; both directions together keep the
    /// flattened bottleneck width (512 at full width and 256 bins).
    pub fn lstm_hidden(&self) -> usize {
        self.lstm_width() / 2
    }

    /// Flattened bottleneck width, channels x remaining bins.
    pub fn lstm_width(&self) -> usize {
        self.channels(5) * self.freq_bins / 64
    }

    pub fn width_label(&self) -> String {
        format!("{}/{}", self.width_num, self.width_den)
    }

    fn branches(&self) -> Vec<(&'static str, usize)> {
        if self.dual_decoder {
            vec![("dec_re", self.c_out / 2), ("dec_im", self.c_out / 2)]
        } else {
            vec![("dec", self.c_out)]
        }
    }

    /// `(in, out)` channels of decoder block `i` in a branch emitting `last`.
    fn decoder_channels(&self, i: usize, last: usize) -> (usize, usize) {
        match i {
            0 => (2 * self.channels(5), self.channels(4)),
            5 => (self.channels(0), last),
            _ => (2 * self.channels(5 - i), self.channels(4 - i)),
        }
    }
}

fn insert_affine<T: Real>(store: &mut ParamStore<T>, name: &str, ch: usize) {
    store.insert(format!("{name}.bn.gamma"), Slot::Param, Tensor::full(&[ch], T::one()));
    store.insert(format!("{name}.bn.beta"), Slot::Param, Tensor::zeros(&[ch]));
    store.insert(format!("{name}.bn.mean"), Slot::Buffer, Tensor::zeros(&[ch]));
    store.insert(format!("{name}.bn.var"), Slot::Buffer, Tensor::full(&[ch], T::one()));
    store.insert(format!("{name}.prelu"), Slot::Param, Tensor::full(&[ch], T::of(PRELU_INIT)));
}

/// Registers LSTM tensors `{name}.l{layer}.{fwd,bwd}.{w_ih,w_hh,bias}`.
pub fn init_lstm<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    input: usize,
    hidden: usize,
    layers: usize,
) {
    for l in 0..layers {
        let d = if l == 0 { input } else { 2 * hidden };
        for dir in ["fwd", "bwd"] {
            let base = format!("{name}.l{l}.{dir}");
            store.insert(format!("{base}.w_ih"), Slot::Param, init_uniform(rng, &[4 * hidden, d], hidden));
            store.insert(format!("{base}.w_hh"), Slot::Param, init_uniform(rng, &[4 * hidden, hidden], hidden));
            store.insert(format!("{base}.bias"), Slot::Param, init_uniform(rng, &[4 * hidden], hidden));
        }
    }
}

/// Registers every tensor of a CRN under `prefix`.
pub fn init_crn<T: Real, R: Rng + ?Sized>(
    cfg: &CrnConfig,
    prefix: &str,
    rng: &mut R,
    store: &mut ParamStore<T>,
) -> Result<()> {
    cfg.validate()?;
    for i in 0..6 {
        let cin = if i == 0 { cfg.c_in } else { cfg.channels(i - 1) };
        let spec = LayerSpec::conv2d(cin, cfg.channels(i));
        let name = format!("{prefix}enc{i}");
        store.insert(format!("{name}.w"), Slot::Param, init_uniform(rng, &spec.weight_shape(), spec.fan_in()));
        store.insert(format!("{name}.b"), Slot::Param, init_uniform(rng, &[spec.out_channels], spec.fan_in()));
        insert_affine(store, &name, cfg.channels(i));
    }
    init_lstm(store, rng, &format!("{prefix}lstm"), cfg.lstm_width(), cfg.lstm_hidden(), LSTM_LAYERS);
    for (branch, last) in cfg.branches() {
        for i in 0..6 {
            let (cin, cout) = cfg.decoder_channels(i, last);
            let spec = LayerSpec::deconv2d(cin, cout);
            let name = format!("{prefix}{branch}{i}");
            store.insert(format!("{name}.w"), Slot::Param, init_uniform(rng, &spec.weight_shape(), spec.fan_in()));
            store.insert(format!("{name}.b"), Slot::Param, init_uniform(rng, &[cout], spec.fan_in()));
            if i < 5 {
                insert_affine(store, &name, cout);
            }
        }
    }
    Ok(())
}

/// Binds stored tensors into a graph, as trainable leaves or constants, and
/// chooses batch-norm statistics accordingly.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    trainable: Vec<String>,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Binder<'a, T> {
    /// Everything frozen; batch norm uses running statistics.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::train(store, &[])
    }

    /// Tensors under any of `prefixes` become trainable and their batch
    /// norms use batch statistics.
    pub fn train(store: &'a ParamStore<T>, prefixes: &[&str]) -> Self {
        Self {
            store,
            trainable: prefixes.iter().map(|s| s.to_string()).collect(),
            bound: HashMap::new(),
            order: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.is_trainable(name) && self.store.slot(name) == Some(Slot::Param) {
            self.order.push(name.to_string());
            g.param(t)
        } else {
            g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn lstm(&mut self, g: &mut Graph<T>, name: &str, layers: usize) -> Result<Vec<Vec<LstmVars>>> {
        (0..layers)
            .map(|l| {
                ["fwd", "bwd"]
                    .iter()
                    .map(|dir| {
                        let base = format!("{name}.l{l}.{dir}");
                        Ok(LstmVars {
                            w_ih: self.var(g, &format!("{base}.w_ih"))?,
                            w_hh: self.var(g, &format!("{base}.w_hh"))?,
                            bias: self.var(g, &format!("{base}.bias"))?,
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Batch norm followed by PReLU for the block called `name`.
    pub fn bn_prelu(&mut self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let gamma = self.var(g, &format!("{name}.bn.gamma"))?;
        let beta = self.var(g, &format!("{name}.bn.beta"))?;
        let y = if self.is_trainable(name) {
            let (y, stats) = g.batchnorm2d(x, gamma, beta, BatchNormMode::Train)?;
            if let Some(s) = stats {
                self.stats.push((name.to_string(), s));
            }
            y
        } else {
            let mean = self.store.get(&format!("{name}.bn.mean"))?.data();
            let var = self.store.get(&format!("{name}.bn.var"))?.data();
            g.batchnorm2d(x, gamma, beta, BatchNormMode::Eval { mean, var })?.0
        };
        let slope = self.var(g, &format!("{name}.prelu"))?;
        Ok(g.prelu(y, slope)?)
    }

    /// Trainable tensors bound so far, in binding order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.order.iter().map(|n| (n.clone(), self.bound[n])).collect()
    }

    pub fn take_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }
}

/// Folds batch statistics into the running buffers.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    for (name, s) in stats {
        let mut mean = store.get(&format!("{name}.bn.mean"))?.data().to_vec();
        let mut var = store.get(&format!("{name}.bn.var"))?.data().to_vec();
        s.update_running(T::of(BN_MOMENTUM), &mut mean, &mut var);
        store.get_mut(&format!("{name}.bn.mean"))?.data_mut().copy_from_slice(&mean);
        store.get_mut(&format!("{name}.bn.var"))?.data_mut().copy_from_slice(&var);
    }
    Ok(())
}

/// One row of a shape trace: layer kind, per-example input and output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub layer: &'static str,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

fn per_example(shape: &[usize]) -> Vec<usize> {
    shape[1..].to_vec()
}

/// Runs the CRN on `x: [B, c_in, T, F]` and returns `(re, im)`, each
/// `[B, c_out / 2, T, F]`. The trace, when requested, follows the first
/// decoder branch and reports the final row with both halves together.
pub fn crn_forward<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    prefix: &str,
    cfg: &CrnConfig,
    x: Var,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    let [batch, c, frames, bins] = shape[..] else {
        return Err(Error::Shape(format!("CRN input must be [B, C, T, F], got {shape:?}")));
    };
    if c != cfg.c_in || bins != cfg.freq_bins {
        return Err(Error::Shape(format!(
            "CRN expects [B, {}, T, {}], got {shape:?}",
            cfg.c_in, cfg.freq_bins
        )));
    }
    if frames == 0 {
        return Err(Error::Shape("CRN input has no frames".into()));
    }
    let mut record = |g: &Graph<T>, layer, a: Var, out: Var| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow { layer, input: per_example(g.shape(a)), output: per_example(g.shape(out)) });
        }
    };

    let mut skips = Vec::with_capacity(6);
    let mut h = x;
    for i in 0..6 {
        let cin = if i == 0 { cfg.c_in } else { cfg.channels(i - 1) };
        let spec = LayerSpec::conv2d(cin, cfg.channels(i));
        let name = format!("{prefix}enc{i}");
        let w = b.var(g, &format!("{name}.w"))?;
        let bias = b.var(g, &format!("{name}.b"))?;
        let y = g.conv2d(h, w, bias, &spec)?;
        let y = b.bn_prelu(g, y, &name)?;
        record(g, "Conv2d", h, y);
        skips.push(y);
        h = y;
    }

    // [B, C, T, f] -> [B, T, C * f] -> LSTM -> back.
    let (ch, fb) = (cfg.channels(5), cfg.freq_bins / 64);
    let p = g.permute(h, &[0, 2, 1, 3])?;
    let flat = g.reshape(p, &[batch, frames, ch * fb])?;
    if let Some(t) = trace.as_deref_mut() {
        t.push(TraceRow { layer: "Reshape", input: per_example(g.shape(h)), output: vec![frames, ch * fb] });
    }
    let layers = b.lstm(g, &format!("{prefix}lstm"), LSTM_LAYERS)?;
    let seq = g.lstm_seq(flat, &layers)?;
    if let Some(t) = trace.as_deref_mut() {
        t.push(TraceRow { layer: "LSTM", input: vec![frames, ch * fb], output: vec![frames, g.shape(seq)[2]] });
    }
    let un = g.reshape(seq, &[batch, frames, ch, fb])?;
    let bottleneck = g.permute(un, &[0, 2, 1, 3])?;
    if let Some(t) = trace.as_deref_mut() {
        t.push(TraceRow {
            layer: "Reshape",
            input: vec![frames, ch * fb],
            output: per_example(g.shape(bottleneck)),
        });
    }

    let mut outputs = Vec::new();
    for (k, (branch, last)) in cfg.branches().into_iter().enumerate() {
        let mut d = bottleneck;
        for i in 0..6 {
            let (cin, cout) = cfg.decoder_channels(i, last);
            let input = if i < 5 { g.concat(&[d, skips[5 - i]], 1)? } else { d };
            let spec = LayerSpec::deconv2d(cin, cout);
            let name = format!("{prefix}{branch}{i}");
            let w = b.var(g, &format!("{name}.w"))?;
            let bias = b.var(g, &format!("{name}.b"))?;
            let y = g.deconv2d(input, w, bias, &spec)?;
            let y = if i < 5 { b.bn_prelu(g, y, &name)? } else { y };
            if k == 0 {
                if let Some(t) = trace.as_deref_mut() {
                    let mut output = per_example(g.shape(y));
                    if i == 5 {
                        output[0] = cfg.c_out;
                    }
                    t.push(TraceRow { layer: "Deconv2d", input: per_example(g.shape(input)), output });
                }
            }
            d = y;
        }
        outputs.push(d);
    }
    match outputs[..] {
        [re, im] => Ok((re, im)),
        [both] => {
            let half = cfg.c_out / 2;
            Ok((g.slice(both, 1, 0, half)?, g.slice(both, 1, half, half)?))
        }
        _ => unreachable!("one or two decoder branches"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_inputs_follow_the_skip_pattern() {
        let cfg = CrnConfig::new(16, 16, 1, 1, DecoderMode::Mask);
        let ins: Vec<usize> = (0..6).map(|i| cfg.decoder_channels(i, 8).0).collect();
        assert_eq!(ins, [512, 512, 256, 128, 64, 16]);
        assert_eq!(cfg.lstm_width(), 1024);
        assert_eq!(2 * cfg.lstm_hidden(), 1024);
    }

    #[test]
    fn width_must_divide_the_ladder() {
        assert!(CrnConfig::new(4, 2, 1, 32, DecoderMode::Map).validate().is_err());
        assert!(CrnConfig::new(4, 2, 1, 16, DecoderMode::Map).validate().is_ok());
        assert!(CrnConfig::new(3, 2, 1, 8, DecoderMode::Map).validate().is_err());
    }
}
