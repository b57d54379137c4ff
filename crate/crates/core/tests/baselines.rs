mod common;

use common::rng;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use twostage::baselines::{
    apply_weights, delay_and_sum, filter_and_sum, mask_mvdr, mvdr_weights, steering_vector, wpe, wpe_stft,
    CovarianceEstimate, CovarianceMode, FilterSumModel, WpeConfig,
};
use twostage::dsp::{stft, Spectrogram, StftConfig, TimeSignal, SAMPLE_RATE};
use twostage::pipeline::ModelConfig;
use twostage::simkit::{
    candidate_positions, direct_delays, mix, simulate_rir, synthetic_speech, Emitter, SceneSpec,
};

fn white(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn random_spec(seed: u64, dim: (usize, usize, usize)) -> Spectrogram {
    let mut r = rng(seed);
    let re = Array3::from_shape_fn(dim, |_| r.random_range(-1.0..1.0));
    let im = Array3::from_shape_fn(dim, |_| r.random_range(-1.0..1.0));
    Spectrogram::new(re, im, StftConfig::default()).unwrap()
}

fn diff_energy(a: &Spectrogram, b: &Spectrogram) -> f64 {
    a.re.iter().zip(&b.re).chain(a.im.iter().zip(&b.im)).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn delay_and_sum_of_identical_channels() {
    let one = random_spec(1, (1, 4, 256));
    let y = one.select(&[0, 0, 0]);
    let out = delay_and_sum(&y, &[0.0; 3]).unwrap();
    assert!(diff_energy(&out, &one) < 1e-20);
}

#[test]
fn delay_and_sum_undoes_phase_delays() {
    let one = random_spec(2, (1, 3, 256));
    let d = 2.75;
    let mut y = one.select(&[0, 0]);
    for t in 0..3 {
        for f in 0..256 {
            let rot = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f as f64 * d / 512.0);
            y.set(1, t, f, one.get(0, t, f) * rot);
        }
    }
    let out = delay_and_sum(&y, &[0.0, d]).unwrap();
    assert!(diff_energy(&out, &one).sqrt() < 1e-6);
    assert!(delay_and_sum(&y, &[0.0]).is_err());
}

#[test]
fn delay_and_sum_gains_snr_in_diffuse_noise() {
    let mut scene = SceneSpec { absorption: [1.0; 6], max_order: 0, ..SceneSpec::default() };
    let len = 16_000;
    let speech = synthetic_speech(len, 3);
    let target = simulate_rir(&scene, Emitter::Source).unwrap();
    let clean = mix(&speech, &speech, &target, &target, f64::INFINITY).unwrap().reverberant_clean;
    // Diffuse field: independent noises from many directions.
    let grid = candidate_positions();
    let mut noise = Array2::zeros((8, len));
    for k in 0..16 {
        scene.noise = grid[(k * 37 + 5) % grid.len()];
        let h = simulate_rir(&scene, Emitter::Noise).unwrap();
        let n = TimeSignal::mono(white(len, 100 + k as u64), SAMPLE_RATE);
        noise += &twostage::simkit::convolve_rir(n.channel(0).as_slice().unwrap(), &h);
    }
    let c = StftConfig::default();
    let s = stft(&clean, &c).unwrap();
    let n = stft(&TimeSignal::new(noise, SAMPLE_RATE), &c).unwrap();
    let d = direct_delays(&scene, scene.source);
    let delays: Vec<f64> = d.iter().map(|v| v - d[0]).collect();
    let snr_in = s.select(&[0]).energy() / n.select(&[0]).energy();
    let snr_out = delay_and_sum(&s, &delays).unwrap().energy() / delay_and_sum(&n, &delays).unwrap().energy();
    assert!(snr_out >= snr_in, "{snr_out} < {snr_in}");
}

#[test]
fn wpe_without_taps_is_identity() {
    let y = random_spec(4, (2, 20, 256));
    let out = wpe(&y, &WpeConfig { taps: 0, ..WpeConfig::default() }).unwrap();
    assert_eq!(out.re, y.re);
    assert_eq!(out.im, y.im);
}

/// Two microphones, direct path plus a 0.7 echo 50 ms later.
fn two_path(len: usize, seed: u64, echo: bool) -> (TimeSignal, TimeSignal, TimeSignal) {
    let s = white(len + 1000, seed);
    let direct = TimeSignal::from_channels(&[s[1000..].to_vec(), s[997..997 + len].to_vec()], SAMPLE_RATE).unwrap();
    let g = if echo { 0.7 } else { 0.0 };
    let late = TimeSignal::from_channels(
        &[s[200..200 + len].iter().map(|v| g * v).collect(), s[170..170 + len].iter().map(|v| g * v).collect()],
        SAMPLE_RATE,
    )
    .unwrap();
    let y = TimeSignal::new(&direct.samples + &late.samples, SAMPLE_RATE);
    (y, direct, late)
}

#[test]
fn wpe_removes_a_late_echo() {
    let (y, direct, late) = two_path(8 * 16_000, 5, true);
    let c = wpe_stft();
    let mut d = stft(&direct, &c).unwrap();
    d.nyquist = None;
    let before = stft(&late, &c).unwrap().energy() / d.energy();
    let z = wpe(&stft(&y, &c).unwrap(), &WpeConfig::default()).unwrap();
    let after = diff_energy(&z, &d) / d.energy();
    assert!(after < 0.5 * before, "late/direct {before} -> {after}");
}

#[test]
fn one_wpe_iteration_lowers_the_weighted_residual() {
    let scene = SceneSpec { max_order: 4, absorption: [0.3; 6], ..SceneSpec::default() };
    let s = TimeSignal::mono(white(4 * 16_000, 6), SAMPLE_RATE);
    let m = mix(&s, &s, &simulate_rir(&scene, Emitter::Source).unwrap(), &simulate_rir(&scene, Emitter::Noise).unwrap(), f64::INFINITY).unwrap();
    let y = stft(&m.mixture.channel_signal(0), &wpe_stft()).unwrap();
    let cfg = WpeConfig { iterations: 1, ..WpeConfig::default() };
    let z = wpe(&y, &cfg).unwrap();
    let start = cfg.delay + cfg.taps - 1;
    for f in 0..256 {
        let (mut wy, mut wz) = (0.0, 0.0);
        for t in start..y.frames() {
            let lambda = y.get(0, t, f).norm_sqr().max(1e-10);
            wy += y.get(0, t, f).norm_sqr() / lambda;
            wz += z.get(0, t, f).norm_sqr() / lambda;
        }
        assert!(wz <= wy * (1.0 + 1e-9), "band {f}: {wz} > {wy}");
    }
}

#[test]
fn wpe_survives_silent_input() {
    let y = Spectrogram::zeros(2, 30, wpe_stft());
    let z = wpe(&y, &WpeConfig::default()).unwrap();
    assert_eq!(z.energy(), 0.0);
}

fn two_source(absorption: f64) -> (Spectrogram, Spectrogram, Spectrogram, Array2<f64>, Array2<f64>) {
    let grid = candidate_positions();
    let scene = SceneSpec { absorption: [absorption; 6], source: grid[100], noise: grid[106], ..SceneSpec::default() };
    let speech = synthetic_speech(32_000, 3);
    let interferer = TimeSignal::mono(white(32_000, 9), SAMPLE_RATE);
    let m = mix(&speech, &interferer, &simulate_rir(&scene, Emitter::Source).unwrap(), &simulate_rir(&scene, Emitter::Noise).unwrap(), 0.0).unwrap();
    let c = StftConfig::default();
    let xs = stft(&m.reverberant_clean, &c).unwrap();
    let xn = stft(&m.noise, &c).unwrap();
    let y = stft(&m.mixture, &c).unwrap();
    let (_, t, f) = y.dim();
    let ms = Array2::from_shape_fn((t, f), |(i, k)| {
        let (a, b) = (xs.get(0, i, k).norm_sqr(), xn.get(0, i, k).norm_sqr());
        a / (a + b).max(1e-30)
    });
    let mn = ms.mapv(|v| 1.0 - v);
    (y, xs, xn, ms, mn)
}

#[test]
fn oracle_mask_mvdr_suppresses_an_interferer() {
    let (y, xs, xn, ms, mn) = two_source(0.8);
    let r = mask_mvdr(&y, &ms, &mn, CovarianceMode::Block).unwrap();
    assert!(r.constraint_error < 1e-6);
    let gs = apply_weights(&xs, &r.weights).unwrap().energy() / xs.select(&[0]).energy();
    let gn = apply_weights(&xn, &r.weights).unwrap().energy() / xn.select(&[0]).energy();
    let atten = 10.0 * (gs / gn).log10();
    assert!(atten >= 15.0, "{atten} dB");
    // Frame-recursive weights keep the constraint at every frame.
    let r = mask_mvdr(&y, &ms, &mn, CovarianceMode::frame()).unwrap();
    assert!(r.constraint_error < 1e-6);
    assert_eq!(r.output.dim(), (1, y.frames(), 256));
}

#[test]
fn identity_noise_gives_matched_filter() {
    let mut r = rng(7);
    let d = DVector::from_fn(4, |_, _| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
    let w = mvdr_weights(&DMatrix::identity(4, 4), &d).unwrap();
    let expect = &d / d.dotc(&d);
    assert!((w - expect).norm() < 1e-5);
}

#[test]
fn steering_vector_is_principal_and_reference_real() {
    let mut r = rng(8);
    let a = DVector::from_fn(3, |_, _| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
    let phi = &a * a.adjoint();
    let d = steering_vector(&phi);
    assert!(d[0].im.abs() < 1e-12 && d[0].re > 0.0);
    // Collinear with a.
    let overlap = d.dotc(&a).norm() / (d.norm() * a.norm());
    assert!((overlap - 1.0).abs() < 1e-10);
}

#[test]
fn all_zero_mask_is_rejected() {
    let y = random_spec(9, (2, 5, 256));
    let z = Array2::zeros((5, 256));
    let o = Array2::ones((5, 256));
    assert!(mask_mvdr(&y, &z, &o, CovarianceMode::Block).is_err());
    assert!(mask_mvdr(&y, &o, &z, CovarianceMode::frame()).is_err());
}

#[test]
fn recursive_covariances_stay_hermitian_psd() {
    let y = random_spec(10, (3, 40, 256));
    let mut r = rng(11);
    let ms = Array2::from_shape_fn((40, 256), |_| r.random_range(0.0..1.0));
    let mn = ms.mapv(|v| 1.0 - v);
    let mut cov = CovarianceEstimate::zeros(3, 256, CovarianceMode::frame());
    for t in 0..40 {
        cov.update_frame(&y, t, &ms, &mn);
        for f in (0..256).step_by(51) {
            for m in [&cov.speech[f], &cov.noise[f]] {
                assert!((m - m.adjoint()).norm() < 1e-10);
                let eig = ((m + m.adjoint()) * Complex64::from(0.5)).symmetric_eigen();
                assert!(eig.eigenvalues.iter().all(|&l| l > -1e-10));
            }
        }
    }
}

#[test]
fn filter_and_sum_examples() {
    let one = random_spec(12, (1, 3, 256));
    let y = one.select(&[0, 0, 0, 0]);
    let quarter = Array3::from_elem(y.dim(), 0.25);
    let zero = Array3::zeros(y.dim());
    assert!(diff_energy(&filter_and_sum(&y, &quarter, &zero).unwrap(), &one) < 1e-24);

    let y = random_spec(13, (3, 3, 256));
    let mut sel = Array3::zeros(y.dim());
    sel.slice_mut(ndarray::s![2, .., ..]).fill(1.0);
    assert!(diff_energy(&filter_and_sum(&y, &sel, &zero.slice(ndarray::s![..3, .., ..]).to_owned()).unwrap(), &y.select(&[2])) < 1e-24);

    let w = random_spec(14, (3, 3, 256));
    let out = filter_and_sum(&y, &w.re, &w.im).unwrap();
    for t in 0..3 {
        for f in 0..256 {
            let mut acc = Complex64::new(0.0, 0.0);
            for p in 0..3 {
                acc += w.get(p, t, f) * y.get(p, t, f);
            }
            assert!((out.get(0, t, f) - acc).norm() < 1e-12);
        }
    }
}

#[test]
fn neural_filter_and_sum_emits_one_channel() {
    let cfg = ModelConfig { mics: 2, width_num: 1, width_den: 16, ..ModelConfig::default() };
    let m = FilterSumModel::<f32>::new(cfg, 15).unwrap();
    let y = random_spec(16, (2, 4, 256));
    assert_eq!(m.filter_and_sum_nn(&y).unwrap().dim(), (1, 4, 256));
    assert!(m.filter_and_sum_nn(&random_spec(17, (3, 4, 256))).is_err());
}
