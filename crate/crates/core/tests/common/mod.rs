#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgrad::{Graph, ParamStore, Slot, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * r.random_range(-1.0..1.0))
}

/// Worst relative error between reverse-mode gradients and central
/// differences (step 1e-5) over up to `per_tensor` sampled entries of every
/// trainable tensor in `store`.
pub fn gradcheck_store(
    store: &ParamStore<f64>,
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>, bool) -> (Var, Vec<(String, Var)>),
) -> (f64, String) {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut g = Graph::new();
    let (loss, vars) = f(&mut g, store, true);
    g.backward(loss).unwrap();
    let grads: Vec<(String, Tensor<f64>)> = vars
        .iter()
        .map(|(n, v)| (n.clone(), g.grad(*v).unwrap_or_else(|| Tensor::zeros(g.shape(*v)))))
        .collect();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let (l, _) = f(&mut g, s, false);
        g.value(l).data()[0]
    };
    let mut r = rng(seed);
    let mut probe = store.clone();
    let mut worst = (0.0, String::new());
    let names: Vec<String> = store.iter().filter(|(_, s, _)| *s == Slot::Param).map(|(n, _, _)| n.to_string()).collect();
    assert_eq!(names.len(), grads.len(), "every parameter must be bound");
    for (name, grad) in &grads {
        let n = grad.numel();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| r.random_range(0..n)).collect() };
        for i in picks {
            let orig = store.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + STEP;
            let up = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - STEP;
            let down = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: {a:e} vs {numeric:e}"));
            }
        }
    }
    worst
}

/// Mixture, reverberant clean and dry signal of the default eight-microphone
/// scene at 5 dB SNR.
pub fn toy_utterance(seconds: f64, seed: u64) -> (twostage::dsp::TimeSignal, twostage::dsp::TimeSignal, twostage::dsp::TimeSignal) {
    use twostage::simkit::{mix, simulate_rir, synthetic_noise, synthetic_speech, Emitter, SceneSpec};
    let len = (seconds * 16_000.0) as usize;
    let scene = SceneSpec::default();
    let m = mix(
        &synthetic_speech(len, seed),
        &synthetic_noise(len, seed + 1),
        &simulate_rir(&scene, Emitter::Source).unwrap(),
        &simulate_rir(&scene, Emitter::Noise).unwrap(),
        5.0,
    )
    .unwrap();
    (m.mixture, m.reverberant_clean, m.dry)
}
