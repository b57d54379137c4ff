//! `twostage`: simulate, train, enhance, baseline, evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use twostage::baselines::{
    delay_and_sum, interferer_attenuation_db, mask_mvdr, oracle_masks, wpe, wpe_stft, CovarianceMode, WpeConfig,
};
use twostage::dsp::{istft, stft, StftConfig, TimeSignal};
use twostage::harness::{
    dataset_config_from_kv, dataset_config_to_kv, loss_curve_csv, Checkpoint, Model, Stage, TrainConfig, Trainer,
    TrainingSet,
};
use twostage::metrics::{stoi, tokenize, wer, MetricReport, UtteranceScore};
use twostage::simkit::{
    build_dataset, direct_delays, read_wav, two_source_mixture, write_wav, DatasetConfig, Manifest, SceneSpec,
    WavFormat,
};
use twostage::{Error, Result};

#[derive(Parser)]
#[command(name = "twostage", version, about = "Two-stage multichannel speech enhancement")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// stage1, stage2, joint or filtersum.
    #[arg(long, global = true)]
    stage: Option<String>,
    /// Checkpoint to load.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and its manifest into --out.
    Simulate,
    /// Train on a simulated dataset; writes model.ckpt and loss.csv to --out.
    Train { data: PathBuf },
    /// Enhance one multichannel WAV with --model; writes --out.
    Enhance { input: PathBuf },
    /// Run a reference system over a dataset, or MVDR on the built-in
    /// two-source scene when no dataset is given.
    Baseline { method: Method, data: Option<PathBuf> },
    /// Score estimates against references; `<name>.txt` transcripts next
    /// to the WAVs add WER.
    Evaluate { reference: PathBuf, estimate: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ds,
    Wpe,
    Mvdr,
    Filtersum,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Ds => "ds",
            Method::Wpe => "wpe",
            Method::Mvdr => "mvdr",
            Method::Filtersum => "filtersum",
        }
    }
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn read_config(common: &Common) -> Result<Option<String>> {
    common.config.as_ref().map(fs::read_to_string).transpose().map_err(Error::from)
}

fn simulate(common: &Common) -> Result<()> {
    let mut cfg = match read_config(common)? {
        Some(text) => dataset_config_from_kv(&text)?,
        None => DatasetConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = need(&common.out, "out")?;
    let m = build_dataset(&cfg, out)?;
    let geometry = "geometry = synthetic stand-in: 6 x 5 x 3 m shoebox, two 4-capsule tetrahedral arrays of radius 3.2 cm\n";
    fs::write(out.join("dataset.txt"), format!("{}{geometry}", dataset_config_to_kv(&cfg)))?;
    println!("wrote {} utterances to {}", m.entries.len(), out.display());
    Ok(())
}

fn train(common: &Common, data: &Path) -> Result<()> {
    let mut cfg = match read_config(common)? {
        Some(text) => TrainConfig::from_kv(&text)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = &common.stage {
        cfg.stage = Stage::parse(s)?;
    }
    cfg.validate()?;
    let out = need(&common.out, "out")?.to_path_buf();
    let set = TrainingSet::from_manifest(&Manifest::load(data)?, &StftConfig::default())?;
    let mut trainer = match &common.model {
        Some(p) => Trainer::resume(cfg, Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    fs::create_dir_all(&out)?;
    trainer.run(&set, |t| {
        let ck = t.checkpoint();
        ck.save(&out.join("model.ckpt"))?;
        if t.iteration < t.config.max_iters {
            ck.save(&out.join(format!("model_{:08}.ckpt", t.iteration)))?;
        }
        fs::write(out.join("loss.csv"), loss_curve_csv(&t.curve))?;
        Ok(())
    })?;
    if let (Some(first), Some(last)) = (trainer.curve.first(), trainer.curve.last()) {
        println!("stage {}: loss {:.6} -> {:.6} over {} iterations", trainer.config.stage.as_str(), first.loss, last.loss, trainer.curve.len());
    }
    Ok(())
}

fn enhance(common: &Common, input: &Path) -> Result<()> {
    let ck = Checkpoint::load(need(&common.model, "model")?)?;
    let x = read_wav(input)?;
    let y = ck.model.enhance(&x)?;
    write_wav(need(&common.out, "out")?, &y, WavFormat::Float32)
}

fn run_method(method: Method, x: &TimeSignal, reverberant: &TimeSignal, source: [f64; 3], model: Option<&Model>) -> Result<TimeSignal> {
    let c = StftConfig::default();
    match method {
        Method::Ds => {
            let scene = SceneSpec { source, ..SceneSpec::default() };
            let d = direct_delays(&scene, source);
            let delays: Vec<f64> = d.iter().map(|v| v - d[0]).collect();
            istft(&delay_and_sum(&stft(x, &c)?, &delays)?, x.len())
        }
        Method::Wpe => {
            let cw = wpe_stft();
            let z = wpe(&stft(x, &cw)?, &WpeConfig::default())?;
            istft(&z.select(&[0]), x.len())
        }
        Method::Mvdr => {
            let y = stft(x, &c)?;
            let s = stft(reverberant, &c)?;
            let noise = TimeSignal::new(&x.samples - &reverberant.samples, x.sample_rate);
            let (ms, mn) = oracle_masks(&s, &stft(&noise, &c)?)?;
            istft(&mask_mvdr(&y, &ms, &mn, CovarianceMode::Block)?.output, x.len())
        }
        Method::Filtersum => match model {
            Some(m @ Model::FilterSum(_)) => m.enhance(x),
            _ => Err(Error::Config("filtersum needs --model with a filter-and-sum checkpoint".into())),
        },
    }
}

fn baseline(common: &Common, method: Method, data: Option<&Path>) -> Result<()> {
    let Some(data) = data else {
        if !matches!(method, Method::Mvdr) {
            return Err(Error::Config(format!("{} needs a dataset directory", method.name())));
        }
        let m = two_source_mixture(0.8, common.seed.unwrap_or(3))?;
        let c = StftConfig::default();
        let (y, s) = (stft(&m.mixture, &c)?, stft(&m.reverberant_clean, &c)?);
        let n = stft(&m.noise, &c)?;
        let (ms, mn) = oracle_masks(&s, &n)?;
        let r = mask_mvdr(&y, &ms, &mn, CovarianceMode::Block)?;
        println!("attenuation_db = {:.2}", interferer_attenuation_db(&r.weights, &s, &n)?);
        println!("constraint_error = {:e}", r.constraint_error);
        if let Some(out) = &common.out {
            write_wav(out, &istft(&r.output, m.mixture.len())?, WavFormat::Float32)?;
        }
        return Ok(());
    };
    let manifest = Manifest::load(data)?;
    let model = common.model.as_deref().map(Checkpoint::load).transpose()?.map(|c| c.model);
    let out = need(&common.out, "out")?;
    fs::create_dir_all(out)?;
    for (i, e) in manifest.entries.iter().enumerate() {
        let (x, reverberant, _) = manifest.load_example(i)?;
        let y = run_method(method, &x, &reverberant, e.source, model.as_ref())?;
        write_wav(&out.join(format!("{}_{}.wav", e.id, method.name())), &y, WavFormat::Float32)?;
    }
    println!("{}: processed {} utterances", method.name(), manifest.entries.len());
    Ok(())
}

fn evaluate(common: &Common, reference: &Path, estimate: &Path) -> Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(reference)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Manifest(format!("no WAV files in {}", reference.display())));
    }
    let mut report = MetricReport::default();
    for r in names {
        let file = r.file_name().expect("listed file has a name");
        let stem = r.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let est = estimate.join(file);
        if !est.exists() {
            return Err(Error::Manifest(format!("no estimate {}", est.display())));
        }
        let (x, y) = (read_wav(&r)?.channel_signal(0), read_wav(&est)?.channel_signal(0));
        let transcripts = [reference, estimate].map(|d| fs::read_to_string(d.join(format!("{stem}.txt"))).ok());
        let w = match transcripts {
            [Some(a), Some(b)] => Some(wer(&tokenize(&a), &tokenize(&b))?),
            _ => None,
        };
        report.push(UtteranceScore { id: stem, stoi: stoi(&x, &y)?, wer: w });
    }
    print!("{}", report.to_text());
    if let Some(out) = &common.out {
        fs::write(out, report.to_key_value())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Simulate => simulate(common),
        Command::Train { data } => train(common, data),
        Command::Enhance { input } => enhance(common, input),
        Command::Baseline { method, data } => baseline(common, *method, data.as_deref()),
        Command::Evaluate { reference, estimate } => evaluate(common, reference, estimate),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
