//! Command-line entry point: dataset generation, training, evaluation,
//! score-map rendering, and the gradient-check harness.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad usage or configuration.

use clap::{Parser, Subcommand};
use momentdiff::config::{Conditioning, DecoderVariant, GenConfig, LossKind, ModelConfig, RunConfig};
use momentdiff::error::Error;
use momentdiff::model::Model;
use momentdiff::synthetic::{generate_examples, read_jsonl, write_jsonl, Example};
use momentdiff::{checkpoint, evaluation, render, training};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "momentdiff", version, about = "Diffusion over 2D temporal maps for language-driven moment localization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/val/test splits as JSONL files.
    GenData {
        /// TOML run configuration (missing keys fall back to defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Write a single data.jsonl with this many examples instead of splits.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 512)]
        train: usize,
        #[arg(long, default_value_t = 128)]
        val: usize,
        #[arg(long, default_value_t = 256)]
        test: usize,
    },
    /// Train a model and write a checkpoint plus a JSONL step log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training examples (JSONL, as produced by gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with Rank n@m retrieval metrics.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON output path (metrics always print to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of DDIM inference steps from the checkpoint.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the DDIM eta from the checkpoint.
        #[arg(long)]
        eta: Option<f64>,
        /// Also score a random-ranking baseline on the same queries.
        #[arg(long, default_value_t = false)]
        baseline: bool,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        /// Write the aggregated score map of the first examples here.
        #[arg(long)]
        dump_maps: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        dump_count: usize,
    },
    /// Convert a score-map JSON file into a plain-text PGM image.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences on small models.
    Gradcheck {
        /// Check this configuration's variant/conditioning/loss instead of
        /// the built-in sweep (model dims are still shrunk to N=4).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidParameter(_) | Error::CoverageViolation { .. } => {
                    ExitCode::from(2)
                }
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> momentdiff::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn sha256_hex(path: &Path) -> momentdiff::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Provenance record for one command invocation. This is the only output
/// with a timestamp; data, logs, and metrics stay byte-reproducible.
fn write_run_manifest(
    dir: &Path,
    command: &str,
    config_path: &Option<PathBuf>,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
) -> momentdiff::Result<()> {
    let hash_all = |paths: &[&Path]| -> momentdiff::Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_hex(p)?)))
            .collect()
    };
    let manifest = serde_json::json!({
        "command": command,
        "config": config_path.as_ref().map(|p| p.display().to_string()),
        "seed": seed,
        "inputs": hash_all(inputs)?,
        "outputs": hash_all(outputs)?,
        "created_unix": unix_now(),
    });
    std::fs::write(
        dir.join(format!("{command}_manifest.json")),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

fn check_examples(cfg: &RunConfig, examples: &[Example]) -> momentdiff::Result<()> {
    for ex in examples {
        if ex.n != cfg.model.n_segments
            || ex.segments.cols() != cfg.model.d_video
            || ex.words.cols() != cfg.model.d_word
        {
            return Err(Error::Malformed(format!(
                "example {} does not match the model dimensions",
                ex.id
            )));
        }
    }
    Ok(())
}

fn run(cmd: Cmd) -> momentdiff::Result<()> {
    match cmd {
        Cmd::GenData {
            config,
            out,
            count,
            train,
            val,
            test,
        } => {
            let cfg = load_config(&config)?;
            std::fs::create_dir_all(&out)?;
            // --count writes one flat file (possibly empty); otherwise the
            // id ranges of the three splits are disjoint by construction.
            let splits: Vec<(&str, usize, usize)> = match count {
                Some(n) => vec![("data", 0, n)],
                None => vec![
                    ("train", 0, train),
                    ("val", train, val),
                    ("test", train + val, test),
                ],
            };
            let mut written = Vec::new();
            for (name, start, n) in splits {
                let examples = generate_examples(&cfg.data, start, n)?;
                let path = out.join(format!("{name}.jsonl"));
                write_jsonl(&path, &examples)?;
                println!("wrote {n} examples to {}", path.display());
                written.push(path);
            }
            let outputs: Vec<&Path> = written.iter().map(|p| p.as_path()).collect();
            let inputs: Vec<&Path> = config.iter().map(|p| p.as_path()).collect();
            write_run_manifest(&out, "gen-data", &config, cfg.data.seed, &inputs, &outputs)?;
            Ok(())
        }
        Cmd::Train {
            config,
            data,
            out: out_dir,
        } => {
            let cfg = load_config(&config)?;
            let examples = read_jsonl(&data)?;
            check_examples(&cfg, &examples)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut model = Model::new(&cfg.model, cfg.train.seed)?;
            let log_path = out_dir.join("train_log.jsonl");
            let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
            let logs = training::train(&mut model, &cfg.diffusion, &cfg.train, &examples, |l| {
                writeln!(log, "{}", serde_json::to_string(l).unwrap()).unwrap();
                if l.step % 100 == 0 {
                    eprintln!("step {:5}  loss {:.6}", l.step, l.loss);
                }
            })?;
            log.flush()?;
            checkpoint::save(&out_dir, &cfg, &model, logs.len())?;
            let inputs: Vec<&Path> = config
                .iter()
                .map(|p| p.as_path())
                .chain(std::iter::once(data.as_path()))
                .collect();
            let params = out_dir.join(checkpoint::PARAMS_FILE);
            let outputs: Vec<&Path> = vec![params.as_path(), log_path.as_path()];
            write_run_manifest(&out_dir, "train", &config, cfg.train.seed, &inputs, &outputs)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint in {}",
                logs.len(),
                logs.last().map(|l| l.loss).unwrap_or(f64::NAN),
                out_dir.display()
            );
            Ok(())
        }
        Cmd::Eval {
            ckpt: ckpt_dir,
            data,
            out,
            steps,
            eta,
            baseline,
            seed,
            dump_maps,
            dump_count,
        } => {
            let (mut cfg, model, _) = checkpoint::load(&ckpt_dir)?;
            if let Some(k) = steps {
                cfg.diffusion.infer_steps = k;
            }
            if let Some(e) = eta {
                cfg.diffusion.eta = e;
            }
            cfg.diffusion.validate()?;
            let examples = read_jsonl(&data)?;
            check_examples(&cfg, &examples)?;
            let report =
                evaluation::evaluate(&model, &cfg.diffusion, cfg.train.loss, &examples, seed)?;
            let mut value: serde_json::Value = serde_json::from_str(&report.to_json())?;
            if baseline {
                let base = evaluation::random_baseline(&model, &examples, seed, 8)?;
                let obj = value.as_object_mut().unwrap();
                for (k, v) in &base.metrics {
                    obj.insert(format!("baseline_{k}"), serde_json::json!(v));
                }
            }
            let text = serde_json::to_string_pretty(&value)? + "\n";
            if let Some(path) = &out {
                std::fs::write(path, &text)?;
            }
            println!("{text}");
            if let Some(dir) = dump_maps {
                std::fs::create_dir_all(&dir)?;
                let squash = matches!(cfg.train.loss, LossKind::BceFull | LossKind::BceRescaled);
                for ex in examples.iter().take(dump_count) {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ex.id as u64);
                    let map = model.infer_map_with(
                        &cfg.diffusion,
                        &ex.segments,
                        &ex.words,
                        squash,
                        &mut rng,
                    )?;
                    std::fs::write(
                        dir.join(format!("map_{}.json", ex.id)),
                        map.to_json().to_string() + "\n",
                    )?;
                }
            }
            Ok(())
        }
        Cmd::Render { map, out } => render::render_file(&map, &out),
        Cmd::Gradcheck {
            config,
            samples,
            threshold,
        } => {
            let base = ModelConfig {
                n_segments: 4,
                d_word: 4,
                d_video: 4,
                d_sentence: 4,
                d_fused: 4,
                d_hidden: 4,
                d_time: 8,
                lstm_hidden: 4,
                scales: 2,
                anchors: 2,
                blocks: 2,
                kernel: 3,
                ..Default::default()
            };
            let gen = GenConfig {
                n_segments: 4,
                d_word: 4,
                d_video: 4,
                m_min: 2,
                m_max: 3,
                prototypes: 3,
                ..Default::default()
            };
            let dcfg = momentdiff::config::DiffusionConfig {
                t_steps: 10,
                ..Default::default()
            };
            let ex = generate_examples(&gen, 0, 1)?.remove(0);
            // --config narrows the sweep to that file's variant / conditioning /
            // loss; the model is still shrunk to the tiny geometry above so the
            // finite-difference pass stays fast.
            let cases: Vec<(DecoderVariant, Conditioning, LossKind)> = match &config {
                Some(path) => {
                    let run = RunConfig::load(path)?;
                    vec![(run.model.variant, run.model.conditioning, run.train.loss)]
                }
                None => vec![
                    (DecoderVariant::Cnn, Conditioning::Concat, LossKind::MseFull),
                    (DecoderVariant::Cnn, Conditioning::Mul, LossKind::BceRescaled),
                    (
                        DecoderVariant::Transformer,
                        Conditioning::CrossAttn,
                        LossKind::MseFull,
                    ),
                    (
                        DecoderVariant::Transformer,
                        Conditioning::Concat,
                        LossKind::BceFull,
                    ),
                ],
            };
            let mut all_ok = true;
            for (variant, conditioning, loss) in cases {
                let cfg = ModelConfig {
                    variant,
                    conditioning,
                    ..base
                };
                let report =
                    training::gradcheck(&cfg, &dcfg, loss, (0.5, 1.0), &ex, 11, samples)?;
                let worst = report
                    .iter()
                    .map(|e| e.max_rel_err)
                    .fold(0.0f64, f64::max);
                let ok = worst < threshold;
                all_ok &= ok;
                println!(
                    "{:12?} {:10?} {:12?}  worst rel err {:.3e}  {}",
                    variant,
                    conditioning,
                    loss,
                    worst,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    for e in report.iter().filter(|e| e.max_rel_err >= threshold) {
                        println!("    {}  {:.3e}", e.name, e.max_rel_err);
                    }
                }
            }
            if all_ok {
                Ok(())
            } else {
                Err(Error::Malformed(
                    "gradient check exceeded the error threshold".into(),
                ))
            }
        }
    }
}
