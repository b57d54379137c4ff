mod common;

use proptest::prelude::*;
use rand::Rng;
use twostage::dsp::TimeSignal;
use twostage::metrics::{challenge_metric, resample, round_half_even, stoi, tokenize, wer, MetricReport, UtteranceScore};
use twostage::simkit::synthetic_speech;

fn lcg(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect()
}

fn speechy(n: usize, fs: f64) -> Vec<f64> {
    let pi2 = 2.0 * std::f64::consts::PI;
    let noise = lcg(n, 1);
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let env = (pi2 * 3.0 * t).sin().max(0.0).powi(2);
            env * ((pi2 * 220.0 * t).sin() + 0.5 * (pi2 * 660.0 * t).sin() + 0.25 * (pi2 * 1800.0 * t).sin()) + 0.01 * noise[i]
        })
        .collect()
}

fn at(x: Vec<f64>, fs: u32) -> TimeSignal {
    TimeSignal::mono(x, fs)
}

// Reference values from an established Python STOI implementation run
// on the same deterministic signals.
#[test]
fn stoi_matches_reference_implementation() {
    let cases = [
        (16_000, 48_000, 0.1, 0.49569485063240193),
        (16_000, 48_000, 0.5, 0.42377319200320424),
        (16_000, 48_000, 2.0, 0.3466580939815424),
        (10_000, 30_000, 0.1, 0.4938717698088452),
        (10_000, 30_000, 0.5, 0.4458906614459887),
        (10_000, 30_000, 2.0, 0.34852365999000934),
    ];
    for (fs, n, g, expect) in cases {
        let x = speechy(n, fs as f64);
        let y: Vec<f64> = x.iter().zip(lcg(n, 2)).map(|(a, b)| a + g * b).collect();
        let s = stoi(&at(x, fs), &at(y, fs)).unwrap();
        assert!((s - expect).abs() < 1e-6, "fs {fs} gain {g}: {s} vs {expect}");
    }
}

#[test]
fn resampler_matches_reference_implementation() {
    let r = resample(&speechy(1000, 16_000.0), 10_000, 16_000);
    assert_eq!(r.len(), 625);
    for (i, expect) in [(0, -0.0005469953915575376), (100, 0.01967195387910526), (624, -0.284399991437124)] {
        assert!((r[i] - expect).abs() < 1e-10, "sample {i}: {} vs {expect}", r[i]);
    }
}

#[test]
fn resampling_keeps_a_low_tone() {
    let x: Vec<f64> = (0..16_000).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin()).collect();
    let r = resample(&x, 10_000, 16_000);
    for (i, v) in r.iter().enumerate().skip(500).take(9000) {
        let want = (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 10_000.0).sin();
        assert!((v - want).abs() < 2e-3, "{i}");
    }
}

#[test]
fn stoi_of_identity_is_one() {
    let x = synthetic_speech(32_000, 4);
    assert!(stoi(&x, &x).unwrap() >= 0.999);
}

#[test]
fn stoi_drops_with_noise() {
    let x = synthetic_speech(48_000, 5);
    let mut r = common::rng(6);
    let noise: Vec<f64> = (0..48_000).map(|_| r.random_range(-1.0..1.0)).collect();
    let px = x.energy(0) / 48_000.0;
    let pn = noise.iter().map(|v| v * v).sum::<f64>() / 48_000.0;
    let mut last = 1.0;
    for snr in [10.0, 0.0, -10.0] {
        let g = (px / pn / 10f64.powf(snr / 10.0)).sqrt();
        let y: Vec<f64> = x.channel(0).iter().zip(&noise).map(|(a, b)| a + g * b).collect();
        let s = stoi(&x, &at(y, 16_000)).unwrap();
        assert!(s < last, "{snr} dB: {s} !< {last}");
        last = s;
    }
}

#[test]
fn stoi_contract_errors() {
    let x = synthetic_speech(32_000, 7);
    assert!(stoi(&at(vec![0.0; 32_000], 16_000), &x).is_err());
    let short = synthetic_speech(4_000, 7);
    assert!(stoi(&short, &short).is_err());
    assert!(stoi(&x, &synthetic_speech(31_999, 7)).is_err());
}

#[test]
fn wer_examples() {
    let r = tokenize("the cat sat down");
    assert_eq!(wer(&r, &r).unwrap(), 0.0);
    assert_eq!(wer(&r, &tokenize("the dog sat down")).unwrap(), 0.25);
    assert_eq!(wer(&r, &tokenize("The Cat sat")).unwrap(), 0.25);
    assert_eq!(wer(&tokenize("a"), &tokenize("b c d")).unwrap(), 3.0);
    assert!(wer::<&str>(&[], &["a"]).is_err());
}

/// Exhaustive search over edit scripts: the cheapest way to turn `r` into `h`.
fn brute_edit(r: &[u8], h: &[u8]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rt)), Some((b, ht))) => {
            let keep = brute_edit(rt, ht) + usize::from(a != b);
            keep.min(brute_edit(rt, h) + 1).min(brute_edit(r, ht) + 1)
        }
    }
}

proptest! {
    #[test]
    fn wer_agrees_with_exhaustive_search(
        r in prop::collection::vec(0u8..3, 1..=8),
        h in prop::collection::vec(0u8..3, 0..=8),
    ) {
        let rs: Vec<String> = r.iter().map(u8::to_string).collect();
        let hs: Vec<String> = h.iter().map(u8::to_string).collect();
        let w = wer(&rs, &hs).unwrap();
        prop_assert!((w - brute_edit(&r, &h) as f64 / r.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn challenge_metric_is_monotone(s in 0.0f64..1.0, w in 0.0f64..1.0, ds in 0.0f64..1.0, dw in 0.0f64..1.0) {
        let base = challenge_metric(s, w).unwrap();
        prop_assert!(challenge_metric((s + ds).min(1.0), w).unwrap() >= base);
        prop_assert!(challenge_metric(s, (w - dw).max(0.0)).unwrap() >= base);
        prop_assert!((0.0..=1.0).contains(&base));
    }
}

#[test]
fn table_rows_follow_the_metric() {
    // (STOI, WER, reported metric)
    let rows = [(0.975, 0.036, 0.970), (0.615, 0.389, 0.613)];
    for (s, w, m) in rows {
        assert_eq!(round_half_even(challenge_metric(s, w).unwrap(), 3), m);
    }
    assert_eq!(challenge_metric(1.0, 0.0).unwrap(), 1.0);
    assert!(challenge_metric(1.1, 0.0).is_err());
    assert!(challenge_metric(0.5, -0.1).is_err());
    assert!(challenge_metric(f64::NAN, 0.0).is_err());
}

#[test]
fn report_clamps_wer_and_averages() {
    let mut rep = MetricReport::default();
    rep.push(UtteranceScore { id: "a".into(), stoi: 0.8, wer: Some(1.5) });
    rep.push(UtteranceScore { id: "b".into(), stoi: 0.6, wer: Some(0.5) });
    assert_eq!(rep.utterances[0].combined(), Some(0.4));
    assert!((rep.mean_stoi().unwrap() - 0.7).abs() < 1e-12);
    assert!((rep.combined().unwrap() - 0.35).abs() < 1e-12);
    let kv = rep.to_key_value();
    assert!(kv.contains("a.wer = 1.5\n"));
    assert!(kv.contains("mean.stoi = "));
    assert!(rep.to_text().lines().count() == 4);

    let mut no_wer = MetricReport::default();
    no_wer.push(UtteranceScore { id: "c".into(), stoi: 0.9, wer: None });
    assert_eq!(no_wer.combined(), None);
    assert!(!no_wer.to_key_value().contains("combined"));
}
