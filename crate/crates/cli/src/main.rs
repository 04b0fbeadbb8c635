mod bench;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sepformer::config::RunConfig;
use sepformer::data::{
    read_bank, read_mixtures, read_wav, seeded_rng, static_mix, synth_toy_bank, write_wav,
    AudioSignal, DynamicMixing, FixedMixtures, MixtureSample, MixtureSource, DEFAULT_SAMPLE_RATE,
};
use sepformer::loss::mean_si_snri;
use sepformer::separator::{load_checkpoint, SepFormer};
use sepformer::trainer::{train, OutputDir, TrainConfig};
use sepformer::Error;

const SEED_VAR: &str = "SEPFORMER_SEED";

#[derive(Parser)]
#[command(
    name = "sepformer",
    version,
    about = "Dual-path transformer speech separation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a bank of tonal sources, plus optional pre-mixed sets.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of bank sources.
        #[arg(long)]
        sources: usize,
        #[arg(long)]
        seconds: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Training mixtures drawn from the bank.
        #[arg(long, default_value_t = 0)]
        mixtures: usize,
        /// Validation mixtures drawn from the bank.
        #[arg(long, default_value_t = 0)]
        valid: usize,
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE)]
        sample_rate: u32,
    },
    /// Train a model; writes metrics.csv and best.ckpt to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mix bank sources on the fly with speed perturbation.
        #[arg(long)]
        dm: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Separate one mixture into <prefix>_1.wav ... <prefix>_Ns.wav.
    Separate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Per-mixture and mean SI-SNRi over a mixture manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Median forward time and peak tensor memory per stride and input length.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        strides: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seconds: Vec<f64>,
        #[arg(long, default_value_t = bench::MIN_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = bench::MIN_WARMUP)]
        warmup: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter count, total and per component.
    Inspect {
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

/// `--seed`, then `SEPFORMER_SEED`, then `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> anyhow::Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_VAR) {
        Ok(text) => text.trim().parse().map_err(|_| {
            Error::Usage(format!("{SEED_VAR}={text:?} is not an unsigned integer")).into()
        }),
        Err(_) => Ok(fallback),
    }
}

fn write_wav_at(path: &Path, signal: &AudioSignal) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    Ok(write_wav(path, signal)?)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    sources: usize,
    seconds: f64,
    seed: u64,
    mixtures: usize,
    valid: usize,
    speakers: usize,
    sample_rate: u32,
) -> anyhow::Result<()> {
    if sources == 0 {
        return Err(Error::Usage("--sources must be at least 1".into()).into());
    }
    if seconds.is_nan() || seconds <= 0.0 {
        return Err(Error::Usage(format!("--seconds must be positive, got {seconds}")).into());
    }
    if mixtures + valid > 0 && speakers > sources {
        return Err(Error::Usage(format!(
            "mixtures of {speakers} speakers need at least {speakers} sources"
        ))
        .into());
    }
    let length = (seconds * sample_rate as f64).round() as usize;
    let bank = synth_toy_bank(sources, length, sample_rate, &mut seeded_rng(seed, &[0]));
    let mut listing = String::new();
    for (i, (_, signal)) in bank.entries.iter().enumerate() {
        let name = format!("sources/src{i}.wav");
        write_wav_at(&out.join(&name), signal)?;
        listing.push_str(&format!("src{i}\t{name}\n"));
    }
    write_text(&out.join("bank.tsv"), &listing)?;
    // re-read the bank so mixtures are built from the quantized sources
    let bank = read_bank(&out.join("bank.tsv"))?;
    for (split, count, stream) in [("train", mixtures, 1u64), ("valid", valid, 2)] {
        if count == 0 {
            continue;
        }
        let mut listing = String::new();
        for j in 0..count {
            let sample = static_mix(&bank, speakers, &mut seeded_rng(seed, &[stream, j as u64]))?;
            let id = format!("{split}{j}");
            let mut line = id.clone();
            for (k, s) in sample.sources.iter().enumerate() {
                let name = format!("{split}/{id}_s{}.wav", k + 1);
                write_wav_at(&out.join(&name), s)?;
                line.push('\t');
                line.push_str(&name);
            }
            write_wav_at(&out.join(format!("{split}/{id}_mix.wav")), &sample.mixture)?;
            listing.push_str(&line);
            listing.push('\n');
        }
        let manifest = if split == "train" {
            "mixtures.tsv"
        } else {
            "valid.tsv"
        };
        write_text(&out.join(manifest), &listing)?;
    }
    println!(
        "wrote {} sources, {mixtures} training and {valid} validation mixtures to {}",
        sources,
        out.display()
    );
    Ok(())
}

fn check_rate(what: &str, rate: u32, expected: u32) -> sepformer::Result<()> {
    if rate != expected {
        return Err(Error::Data(format!(
            "{what} is sampled at {rate} Hz but the model expects {expected} Hz"
        )));
    }
    Ok(())
}

fn load_fixed(path: &Path, config: &RunConfig) -> anyhow::Result<Vec<MixtureSample>> {
    let samples: Vec<MixtureSample> = read_mixtures(path, config.model.num_speakers)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    for s in &samples {
        check_rate(
            &path.display().to_string(),
            s.mixture.sample_rate,
            config.model.sample_rate,
        )?;
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{} lists no mixtures", path.display())).into());
    }
    Ok(samples)
}

fn run_train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    dm: bool,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let defaults = if dm {
        TrainConfig::dynamic_mixing()
    } else {
        TrainConfig::default()
    };
    let mut config = RunConfig::load_with(config_path, defaults)?;
    config.train.seed = resolve_seed(seed, config.train.seed)?;
    let mut valid = load_fixed(&data.join("valid.tsv"), &config)?;
    if config.train.val_mixtures > 0 {
        valid.truncate(config.train.val_mixtures);
    }
    let source: Box<dyn MixtureSource> = if dm {
        let bank = read_bank(&data.join("bank.tsv"))?;
        for (tag, s) in &bank.entries {
            check_rate(tag, s.sample_rate, config.model.sample_rate)?;
        }
        Box::new(DynamicMixing {
            bank,
            num_speakers: config.model.num_speakers,
            seed: config.train.seed,
        })
    } else {
        Box::new(FixedMixtures(load_fixed(
            &data.join("mixtures.tsv"),
            &config,
        )?))
    };
    let mut model = SepFormer::new(config.model.clone(), config.train.seed)?;
    let out_dir = OutputDir(out.to_path_buf());
    let state = train(
        &mut model,
        source.as_ref(),
        &valid,
        &config.train,
        Some(&out_dir),
    )?;
    for r in &state.history {
        println!(
            "epoch {} step {} train_loss {:.4} val_si_snri_db {:.4} lr {:e}",
            r.epoch, r.step, r.train_loss, r.val_si_snri_db, r.lr
        );
    }
    println!(
        "best val SI-SNRi {:.4} dB; metrics in {}",
        state.best_val_si_snri(),
        out_dir.metrics().display()
    );
    Ok(())
}

fn separate(model_path: &Path, input: &Path, prefix: &str) -> anyhow::Result<()> {
    let model = load_checkpoint(model_path)?;
    let mixture = read_wav(input)?;
    check_rate(
        &input.display().to_string(),
        mixture.sample_rate,
        model.config().sample_rate,
    )?;
    let estimates = model.separate(&mixture.samples)?;
    for (k, est) in estimates.into_iter().enumerate() {
        let path = PathBuf::from(format!("{prefix}_{}.wav", k + 1));
        write_wav_at(&path, &AudioSignal::new(est, mixture.sample_rate))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn eval(model_path: &Path, manifest: &Path) -> anyhow::Result<()> {
    let model = load_checkpoint(model_path)?;
    let ns = model.config().num_speakers;
    let mixtures = read_mixtures(manifest, ns)?;
    if mixtures.is_empty() {
        return Err(Error::Data(format!("{} lists no mixtures", manifest.display())).into());
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "id,si_snri_db")?;
    let mut total = 0.0;
    for (id, sample) in &mixtures {
        check_rate(id, sample.mixture.sample_rate, model.config().sample_rate)?;
        let ests = model.separate(&sample.mixture.samples)?;
        let value = mean_si_snri(&ests, &sample.mixture.samples, &sample.targets())?;
        total += value;
        writeln!(stdout, "{id},{value:.6}")?;
    }
    writeln!(stdout, "mean,{:.6}", total / mixtures.len() as f64)?;
    Ok(())
}

fn run_bench(config_path: &Path, plan: bench::BenchPlan, out: Option<&Path>) -> anyhow::Result<()> {
    let config = RunConfig::load(config_path)?;
    let mut text = format!("{}\n", bench::HEADER);
    println!("{}", bench::HEADER);
    bench::run(&config.model, &plan, |r| {
        let line = r.csv_line();
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    })?;
    if let Some(path) = out {
        write_text(path, &text)?;
    }
    Ok(())
}

fn inspect(config: Option<&Path>, model: Option<&Path>) -> anyhow::Result<()> {
    let model = match (config, model) {
        (_, Some(path)) => load_checkpoint(path)?,
        (Some(path), None) => SepFormer::new(RunConfig::load(path)?.model, 0)?,
        (None, None) => unreachable!("clap requires one of --config and --model"),
    };
    println!("component,params");
    let breakdown = model.parameter_breakdown();
    for (name, count) in &breakdown {
        println!("{name},{count}");
    }
    println!("total,{}", breakdown.iter().map(|(_, c)| c).sum::<usize>());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            out,
            sources,
            seconds,
            seed,
            mixtures,
            valid,
            speakers,
            sample_rate,
        } => {
            let seed = resolve_seed(seed, 0)?;
            gen_data(
                &out,
                sources,
                seconds,
                seed,
                mixtures,
                valid,
                speakers,
                sample_rate,
            )
            .with_context(|| format!("gen-data into {}", out.display()))
        }
        Command::Train {
            config,
            data,
            out,
            dm,
            seed,
        } => run_train(&config, &data, &out, dm, seed),
        Command::Separate {
            model,
            input,
            out_prefix,
        } => separate(&model, &input, &out_prefix),
        Command::Eval { model, manifest } => eval(&model, &manifest),
        Command::Bench {
            config,
            strides,
            seconds,
            repeats,
            warmup,
            seed,
            out,
        } => {
            let plan = bench::BenchPlan {
                strides,
                seconds,
                repeats,
                warmup,
                seed: resolve_seed(seed, 0)?,
            };
            run_bench(&config, plan, out.as_deref())
        }
        Command::Inspect { config, model } => inspect(config.as_deref(), model.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .chain()
                .find_map(|e| e.downcast_ref::<Error>())
                .map_or("error", Error::kind);
            // library errors already render their own causes
            let mut parts = Vec::new();
            for cause in err.chain() {
                parts.push(cause.to_string());
                if cause.is::<Error>() {
                    break;
                }
            }
            let message = parts.join(": ").replace('\n', " ");
            eprintln!("error[{kind}]: {message}");
            ExitCode::FAILURE
        }
    }
}
