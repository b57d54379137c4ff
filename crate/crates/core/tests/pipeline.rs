mod common;

use common::{gradcheck_store, rng, uniform};
use ndarray::{s, Array3};
use rand::Rng;
use tensorgrad::Tensor;
use twostage::crn::Binder;
use twostage::dsp::{ratio_mask, stft, Spectrogram, StftConfig, TimeSignal, SAMPLE_RATE};
use twostage::loss::{total_loss_graph, LossWeights};
use twostage::pipeline::{
    channel0, spatial_graph, stage1_graph, stage2_graph, ModelConfig, StageOneOutput, TwoStageModel, SPATIAL,
};
use twostage::simkit::{mix, simulate_rir, synthetic_noise, synthetic_speech, Emitter, SceneSpec};

fn toy(mics: usize, hidden: usize) -> ModelConfig {
    ModelConfig { mics, width_num: 1, width_den: 16, spatial_hidden: hidden, ..ModelConfig::default() }
}

fn random_spec(seed: u64, dim: (usize, usize, usize)) -> Spectrogram {
    let mut r = rng(seed);
    let re = Array3::from_shape_fn(dim, |_| r.random_range(-1.0..1.0));
    let im = Array3::from_shape_fn(dim, |_| r.random_range(-1.0..1.0));
    Spectrogram::new(re, im, StftConfig::default()).unwrap()
}

fn max_diff(a: &Spectrogram, b: &Spectrogram) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.re.iter().zip(&b.re).chain(a.im.iter().zip(&b.im)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn identity_mask_passes_the_mixture_through() {
    let mut m = TwoStageModel::<f64>::new(toy(2, 4), 1).unwrap();
    m.force_identity_mask().unwrap();
    let y = random_spec(2, (2, 5, 256));
    let s1 = m.stage1_mimo(&y).unwrap();
    assert_eq!(s1.spec.dim(), y.dim());
    assert!(max_diff(&s1.spec, &y) < 1e-12);
}

#[test]
fn oracle_ratio_mask_recovers_reverberant_channels() {
    let scene = SceneSpec { max_order: 2, ..SceneSpec::default() };
    let speech = synthetic_speech(4000, 3);
    let noise = synthetic_noise(4000, 4);
    let m = mix(
        &speech,
        &noise,
        &simulate_rir(&scene, Emitter::Source).unwrap(),
        &simulate_rir(&scene, Emitter::Noise).unwrap(),
        5.0,
    )
    .unwrap();
    let c = StftConfig::default();
    let y = stft(&m.mixture, &c).unwrap();
    let s = stft(&m.reverberant_clean, &c).unwrap();
    let mask = ratio_mask(&s, &y, 1e-12).unwrap();
    let out = StageOneOutput::from_mask(&y, &mask).unwrap();
    assert_eq!(out.spec.channels(), 8);
    let mut s_no_nyq = s.clone();
    s_no_nyq.nyquist = None;
    assert!(max_diff(&out.spec, &s_no_nyq) < 1e-5);
}

#[test]
fn spatial_filter_zero_in_zero_out() {
    let mut m = TwoStageModel::<f64>::new(toy(2, 4), 5).unwrap();
    m.zero_biases();
    let s1 = StageOneOutput { spec: Spectrogram::zeros(2, 3, StftConfig::default()) };
    let out = m.spatial_filter(&s1).unwrap();
    assert_eq!(out.dim(), (1, 3, 256));
    assert_eq!(out.energy(), 0.0);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM cell from a zero state: returns h.
fn cell(x: &[f64], w_ih: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let h = bias.numel() / 4;
    let gate = |k: usize, j: usize| {
        let row = k * h + j;
        bias.data()[row] + (0..x.len()).map(|d| w_ih.data()[row * x.len() + d] * x[d]).sum::<f64>()
    };
    (0..h)
        .map(|j| {
            let c = sigmoid(gate(0, j)) * gate(2, j).tanh();
            sigmoid(gate(3, j)) * c.tanh()
        })
        .collect()
}

#[test]
fn single_frame_band_equals_cell_and_projection() {
    let m = TwoStageModel::<f64>::new(ModelConfig { mics: 1, ..toy(1, 3) }, 6).unwrap();
    let y = random_spec(7, (1, 1, 256));
    let out = m.spatial_filter(&StageOneOutput { spec: y.clone() }).unwrap();
    let p = |n: &str| m.params.get(&format!("{SPATIAL}{n}")).unwrap().clone();
    for f in [0, 17, 255] {
        let x = [y.re[[0, 0, f]], y.im[[0, 0, f]]];
        let mean = (x[0] + x[1]) / 2.0;
        let var = ((x[0] - mean).powi(2) + (x[1] - mean).powi(2)) / 2.0;
        let (g, b) = (p("ln.gamma"), p("ln.beta"));
        let ln: Vec<f64> = (0..2).map(|i| (x[i] - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i]).collect();
        let mut h1 = cell(&ln, &p("lstm.l0.fwd.w_ih"), &p("lstm.l0.fwd.bias"));
        h1.extend(cell(&ln, &p("lstm.l0.bwd.w_ih"), &p("lstm.l0.bwd.bias")));
        let mut h2 = cell(&h1, &p("lstm.l1.fwd.w_ih"), &p("lstm.l1.fwd.bias"));
        h2.extend(cell(&h1, &p("lstm.l1.bwd.w_ih"), &p("lstm.l1.bwd.bias")));
        let (w, bias) = (p("fc.w"), p("fc.b"));
        let fc: Vec<f64> = (0..2).map(|o| bias.data()[o] + (0..6).map(|i| w.data()[o * 6 + i] * h2[i]).sum::<f64>()).collect();
        assert!((out.re[[0, 0, f]] - fc[0]).abs() < 1e-12);
        assert!((out.im[[0, 0, f]] - fc[1]).abs() < 1e-12);
    }
}

#[test]
fn swapping_bands_swaps_outputs() {
    let m = TwoStageModel::<f64>::new(toy(2, 4), 8).unwrap();
    let y = random_spec(9, (2, 6, 256));
    let out = m.spatial_filter(&StageOneOutput { spec: y.clone() }).unwrap();
    let (a, b) = (10, 200);
    let mut swapped = y.clone();
    for arr in [&mut swapped.re, &mut swapped.im] {
        let ca = arr.slice(s![.., .., a]).to_owned();
        let cb = arr.slice(s![.., .., b]).to_owned();
        arr.slice_mut(s![.., .., a]).assign(&cb);
        arr.slice_mut(s![.., .., b]).assign(&ca);
    }
    let out2 = m.spatial_filter(&StageOneOutput { spec: swapped }).unwrap();
    for t in 0..6 {
        for f in 0..256 {
            let g = if f == a { b } else if f == b { a } else { f };
            assert!((out2.re[[0, t, f]] - out.re[[0, t, g]]).abs() < 1e-12);
            assert!((out2.im[[0, t, f]] - out.im[[0, t, g]]).abs() < 1e-12);
        }
    }
}

#[test]
fn stage_two_maps_four_channels_to_two() {
    let m = TwoStageModel::<f32>::new(toy(2, 4), 10).unwrap();
    for t in [1, 4] {
        let a = random_spec(11, (1, t, 256));
        let b = random_spec(12, (1, t, 256));
        let out = m.stage2_miso(&a, &b).unwrap();
        assert_eq!(out.dim(), (1, t, 256));
    }
    let a = random_spec(13, (2, 3, 256));
    assert!(m.stage2_miso(&a, &a).is_err());
}

#[test]
fn zero_model_inputs_give_zero_outputs() {
    let mut m = TwoStageModel::<f64>::new(toy(2, 4), 14).unwrap();
    m.zero_biases();
    let z = Spectrogram::zeros(1, 3, StftConfig::default());
    assert_eq!(m.stage2_miso(&z, &z).unwrap().energy(), 0.0);
    let x = TimeSignal::zeros(2, 2000, SAMPLE_RATE);
    let out = m.enhance(&x).unwrap();
    assert_eq!((out.channels(), out.len()), (1, 2000));
    assert!(out.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn enhance_keeps_length_and_checks_inputs() {
    let m = TwoStageModel::<f32>::new(toy(2, 4), 15).unwrap();
    let x = TimeSignal::new(ndarray::Array2::from_shape_fn((2, 1700), |(p, i)| ((i + p) as f64 * 0.01).sin()), SAMPLE_RATE);
    let out = m.enhance(&x).unwrap();
    assert_eq!((out.channels(), out.len()), (1, 1700));
    assert!(m.enhance(&TimeSignal::zeros(3, 1700, SAMPLE_RATE)).is_err());
    assert!(m.enhance(&TimeSignal::zeros(2, 1700, 8000)).is_err());
}

#[test]
fn composed_network_gradients_match_finite_differences() {
    let mut cfg = toy(2, 3);
    cfg.stft = StftConfig::default();
    let model = TwoStageModel::<f64>::new(cfg, 16).unwrap();
    let mut r = rng(17);
    let y = uniform(&mut r, &[2, 2, 2, 2, 256], 1.0);
    let tgt = uniform(&mut r, &[2, 2, 1, 2, 256], 1.0);
    let tgt1 = uniform(&mut r, &[2, 2, 2, 2, 256], 1.0);
    let (worst, at) = gradcheck_store(&model.params, 3, 18, |g, s, _| {
        let mut b = Binder::train(s, &[""]);
        let yv = g.constant(y.clone());
        let (_, s1) = stage1_graph(g, &mut b, &cfg, yv).unwrap();
        let t1 = g.constant(tgt1.clone());
        let l1 = total_loss_graph(g, s1, t1, LossWeights::default()).unwrap();
        let f = spatial_graph(g, &mut b, s1).unwrap();
        let y0 = channel0(g, yv).unwrap();
        let out = stage2_graph(g, &mut b, &cfg, f, y0).unwrap();
        let t = g.constant(tgt.clone());
        let l2 = total_loss_graph(g, out, t, LossWeights::default()).unwrap();
        (g.add(l1, l2).unwrap(), b.trainable_vars())
    });
    assert!(worst < 1e-3, "{worst:e} at {at}");
}

#[test]
fn graph_and_inference_paths_agree() {
    let m = TwoStageModel::<f64>::new(toy(2, 4), 19).unwrap();
    let y = random_spec(20, (2, 4, 256));
    let direct = m.enhance_spectrogram(&y).unwrap();
    let s1 = m.stage1_mimo(&y).unwrap();
    let f = m.spatial_filter(&s1).unwrap();
    let staged = m.stage2_miso(&f, &y.select(&[0])).unwrap();
    assert!(max_diff(&direct, &staged) < 1e-12);
}
