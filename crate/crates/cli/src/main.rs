use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dmgan::ablation::{ablation_run, format_table};
use dmgan::config::TrainConfig;
use dmgan::data;
use dmgan::encoder::{Classifier, ClassifierTraining};
use dmgan::evaluate::{evaluate, inspect, EvalOptions};
use dmgan::image_io;
use dmgan::metrics;
use dmgan::train::Trainer;

const DEFAULT_EXTRACTOR: &str = "extractor.dmgk";

#[derive(Parser)]
#[command(name = "dmgan", version, about = "Text-to-image GAN with dynamic memory, at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic captioned-shapes dataset as PNGs plus captions.
    GenData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4800)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.dmgk, log.jsonl and samples.png to OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint with IS, FID and R-precision.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = DEFAULT_EXTRACTOR)]
        extractor: PathBuf,
        /// Sample grid; defaults to the report path with a .png extension.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and score the baseline / +M / +M+WG / +M+WG+RG ladder.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value = DEFAULT_EXTRACTOR)]
        extractor: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Dump the top-k words each memory stage attends to for one caption.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit the classifier used as feature extractor by `eval` and `ablate`.
    TrainExtractor {
        #[arg(long, default_value = DEFAULT_EXTRACTOR)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// FID between two DMF1 feature files computed elsewhere.
    ScoreFeatures {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData { seed, count, res, out } => gen_data(seed, count, res, &out),
        Cmd::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Cmd::Eval {
            ckpt,
            n,
            report,
            extractor,
            grid,
            seed,
        } => eval(&ckpt, n, &report, &extractor, grid, seed),
        Cmd::Ablate {
            config,
            seeds,
            n,
            extractor,
            out,
        } => ablate(&config, seeds, n, &extractor, &out),
        Cmd::Inspect {
            ckpt,
            caption,
            k,
            seed,
            out,
        } => inspect_cmd(&ckpt, &caption, k, seed, &out),
        Cmd::TrainExtractor { out, res, seed } => train_extractor(&out, res, seed),
        Cmd::ScoreFeatures { real, fake } => score_features(&real, &fake),
    }
}

fn gen_data(seed: u64, count: usize, res: usize, out: &Path) -> Result<()> {
    let samples = data::gen_dataset(seed, count, res)?;
    let images = out.join("images");
    fs::create_dir_all(&images)?;
    let mut captions = BufWriter::new(fs::File::create(out.join("captions.tsv"))?);
    writeln!(captions, "index\tclass\tcaption")?;
    for (i, s) in samples.iter().enumerate() {
        image_io::save_image(&images.join(format!("{i:06}.png")), &s.image)?;
        writeln!(captions, "{i}\t{}\t{}", s.class_id(), s.caption)?;
    }
    captions.flush()?;
    data::vocabulary().save(&out.join("vocab.txt"))?;
    let preview: Vec<_> = samples.iter().take(64).map(|s| s.image.clone()).collect();
    image_io::save_grid(&out.join("grid.png"), &preview, 8)?;
    log::info!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let c = dmgan::checkpoint::Checkpoint::load(ckpt)?;
            Trainer::from_checkpoint(cfg, &c)?
        }
        None => Trainer::new(cfg)?,
    };
    let ckpt = out.join("checkpoint.dmgk");
    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(resume.is_some())
            .write(true)
            .truncate(resume.is_none())
            .open(out.join("log.jsonl"))?,
    );
    let every = trainer.cfg.checkpoint_every;
    let total = trainer.cfg.total_steps();
    log::info!("training from step {} to {total}", trainer.step);
    let result = trainer.run(|t, report| {
        writeln!(log, "{}", serde_json::to_string(report)?)?;
        if every > 0 && t.step % every == 0 {
            log.flush()?;
            t.save(&ckpt)?;
            log::info!("step {}/{total}: checkpoint saved", t.step);
        }
        Ok(())
    });
    log.flush()?;
    if let Err(e) = result {
        bail!("training stopped at step {}: {e}; last checkpoint kept at {}", trainer.step, ckpt.display());
    }
    trainer.save(&ckpt)?;
    let test = dmgan::evaluate::test_set(trainer.cfg.data_seed, 16, trainer.model.config.final_resolution())?;
    let caps: Vec<Vec<usize>> = test.iter().map(|s| s.tokens.clone()).collect();
    let g = dmgan::evaluate::generate_all(&trainer.model, &trainer.store, &caps, 0)?;
    image_io::save_grid(&out.join("samples.png"), &g.images, 8)?;
    log::info!("finished at step {}; checkpoint {}", trainer.step, ckpt.display());
    Ok(())
}

fn eval(ckpt: &Path, n: usize, report: &Path, extractor: &Path, grid: Option<PathBuf>, seed: u64) -> Result<()> {
    let extractor = Classifier::load(extractor)?;
    let trainer = Trainer::load(ckpt)?;
    let res = trainer.model.config.final_resolution();
    if extractor.res() != res {
        bail!(
            "extractor was trained at {}x{} but the model generates {res}x{res}; retrain it with `dmgan train-extractor --res {res}`",
            extractor.res(),
            extractor.res()
        );
    }
    let opts = EvalOptions {
        n,
        data_seed: trainer.cfg.data_seed,
        seed,
        ..EvalOptions::default()
    };
    let e = evaluate(&trainer.model, &trainer.store, &extractor, &opts)?;
    fs::write(report, serde_json::to_string_pretty(&e.report)?)?;
    let grid = grid.unwrap_or_else(|| report.with_extension("png"));
    let shown = e.generated.images.len().min(64);
    image_io::save_grid(&grid, &e.generated.images[..shown], 8)?;
    let r = &e.report;
    println!(
        "IS {}  FID {:.3}  R-precision {}",
        metrics::MeanStd { mean: r.is_mean, std: r.is_std },
        r.fid,
        metrics::MeanStd { mean: r.rp_mean, std: r.rp_std }
    );
    Ok(())
}

fn ablate(config: &Path, seeds: u64, n: usize, extractor: &Path, out: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let extractor = Classifier::load(extractor)?;
    let seeds: Vec<u64> = (0..seeds).map(|s| cfg.seed + s).collect();
    let opts = EvalOptions {
        n,
        ..EvalOptions::default()
    };
    let rows = ablation_run(&cfg, &seeds, &extractor, &opts, |v, s| log::info!("training {v} with seed {s}"))?;
    fs::create_dir_all(out)?;
    let table = format_table(&rows);
    fs::write(out.join("ablation.md"), &table)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(())
}

fn inspect_cmd(ckpt: &Path, caption: &str, k: usize, seed: u64, out: &Path) -> Result<()> {
    let trainer = Trainer::load(ckpt)?;
    let ins = inspect(&trainer.model, &trainer.store, &trainer.vocab, caption, k, seed)?;
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(&ins)?;
    fs::write(out.join("inspect.json"), &json)?;
    image_io::save_grid(&out.join("inspect.png"), &ins.images, ins.images.len())?;
    println!("{json}");
    Ok(())
}

fn train_extractor(out: &Path, res: usize, seed: u64) -> Result<()> {
    let t = ClassifierTraining {
        res,
        seed: ClassifierTraining::default().seed ^ seed,
        ..ClassifierTraining::default()
    };
    let mut c = Classifier::new(res, seed)?;
    let acc = c.fit(&t)?;
    if acc < t.target_accuracy {
        bail!("extractor reached only {acc:.4} held-out accuracy (target {})", t.target_accuracy);
    }
    c.save(out)?;
    println!("held-out accuracy {acc:.4}; saved {}", out.display());
    Ok(())
}

fn score_features(real: &Path, fake: &Path) -> Result<()> {
    let stats = |p: &Path| -> Result<metrics::GaussianStats> {
        let f = metrics::load_features(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(metrics::gaussian_stats(&f.cast())?)
    };
    println!("FID {:.6}", metrics::fid(&stats(real)?, &stats(fake)?)?);
    Ok(())
}
