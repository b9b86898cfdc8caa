//! The `slb` command line.
//!
//! Every subcommand resolves a [`RunConfig`] from defaults, an optional
//! config file and command-line overrides (in that order of increasing
//! precedence), writes it to `<out>/resolved.cfg`, and then does its work.
//! Exit status is 0 on success, 2 on usage errors (bad flags, missing or
//! invalid config) and 1 on runtime errors.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::parse_override;
use crate::lab::{
    ablate, evaluate, gen_dataset, grad_check, oracle_verify, EvalReport, Rules, RunConfig, Sample,
    Target, Trainer, Variant, METRIC_HEADER,
};
use crate::modality::Modality;
use crate::model::{load_checkpoint, save_checkpoint, Sampler};
use crate::streams::{InterleavedStream, Token, STREAM_HEADER};
use crate::timeline;

#[derive(Debug, Parser)]
#[command(name = "slb", about = "Speech-language-behavior token model lab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Data-parallel workers (overrides `train.workers`).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dotted config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train and eval splits.
    GenData,
    /// Train a model on the synthetic task.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Extend a prompt following the configured schedule.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt stream file; defaults to one text token.
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// greedy | temperature:T | topk:K:T
        #[arg(long, default_value = "greedy")]
        sampler: String,
        /// Number of times the schedule pattern is repeated.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Print the rotary timeline of a stream.
    InspectTimeline {
        /// Stream file; defaults to a three-token sample.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients with central differences.
    GradCheck {
        /// Coordinates sampled per parameter group.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Train every variant on several seeds and tabulate accuracy.
    Ablate {
        /// Comma-separated variant names; default all.
        #[arg(long)]
        variants: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Runs the command line; returns the process exit status.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return 2;
            }
            let _ = write!(stdout, "{e}");
            return 0;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(stderr, "error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(stderr, "error: {m}");
            1
        }
    }
}

/// Defaults, then the config file, then `--seed`/`--workers`, then every
/// `--set` in order.
fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut run = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        run.apply_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = common.seed {
        run.set("seed", &seed.to_string()).map_err(usage)?;
    }
    if let Some(w) = common.workers {
        run.set("train.workers", &w.to_string()).map_err(usage)?;
    }
    for s in &common.set {
        let (k, v) = parse_override(s).map_err(usage)?;
        run.set(&k, &v).map_err(usage)?;
    }
    run.validate().map_err(usage)?;
    Ok(run)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_stream(path: &Path) -> Result<InterleavedStream, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| runtime(format!("cannot read stream {}: {e}", path.display())))?;
    InterleavedStream::parse(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let mut run = resolve(&cli.common)?;
    let dir = cli.common.out.clone();
    fs::create_dir_all(&dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    // checkpoint-driven commands take the model section from the checkpoint
    let ckpt = match &cli.command {
        Command::Eval { checkpoint } | Command::Generate { checkpoint, .. } => {
            let c = load_checkpoint(checkpoint).map_err(runtime)?;
            run.model = c.model.config.clone();
            run.task.vocab = run.model.vocab;
            Some(c)
        }
        _ => None,
    };
    write_file(&dir.join("resolved.cfg"), run.to_text())?;
    let mut say = String::new();
    match cli.command {
        Command::GenData => {
            let (train, eval) = datasets(&run)?;
            write_file(&dir.join("train.streams"), dataset_text(&train))?;
            write_file(&dir.join("eval.streams"), dataset_text(&eval))?;
            let rule = |s: &[Sample]| {
                s.iter()
                    .flat_map(|x| &x.targets)
                    .filter(|&&t| t == Target::Rule)
                    .count()
            };
            let _ = writeln!(
                say,
                "train: {} sequences, {} rule targets\neval: {} sequences, {} rule targets\noracle violations: 0",
                train.len(),
                rule(&train),
                eval.len(),
                rule(&eval)
            );
        }
        Command::Train { resume } => {
            let (train, eval) = datasets(&run)?;
            let mut trainer = match resume {
                Some(p) => {
                    let c = load_checkpoint(&p).map_err(runtime)?;
                    Trainer::resume(&run, &train, &eval, c).map_err(runtime)?
                }
                None => Trainer::new(&run, &train, &eval).map_err(runtime)?,
            };
            trainer.run_until(run.train.steps).map_err(runtime)?;
            let outcome = trainer.finish().map_err(runtime)?;
            let mut log = format!("{METRIC_HEADER}\n");
            for r in &outcome.log {
                let _ = writeln!(log, "{r}");
            }
            write_file(&dir.join("metrics.tsv"), log)?;
            save_checkpoint(&outcome.checkpoint, &dir.join("model.ckpt")).map_err(runtime)?;
            let _ = writeln!(say, "trained to step {}", outcome.checkpoint.step);
            say.push_str(&eval_summary(&outcome.final_eval));
        }
        Command::Eval { .. } => {
            let c = ckpt.expect("loaded above");
            let eval = gen_dataset(&run.eval_task()).map_err(runtime)?;
            let r = evaluate(&c.model, &eval, run.train.workers).map_err(runtime)?;
            let mut log = format!("{METRIC_HEADER}\n");
            for rec in r.records(c.step) {
                let _ = writeln!(log, "{rec}");
            }
            write_file(&dir.join("eval.tsv"), log)?;
            say.push_str(&eval_summary(&r));
        }
        Command::Generate {
            prompt,
            sampler,
            repeats,
            ..
        } => {
            let c = ckpt.expect("loaded above");
            let sampler = parse_sampler(&sampler).map_err(usage)?;
            let prompt = match prompt {
                Some(p) => read_stream(&p)?,
                None => InterleavedStream::from_tokens(vec![Token::new(0, Modality::Text, 0.0)]),
            };
            let schedule: Vec<(Modality, usize)> = (0..repeats)
                .flat_map(|_| c.model.config.schedule.iter().copied())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            let g = c
                .model
                .generate(&prompt, &schedule, sampler, &mut rng)
                .map_err(runtime)?;
            write_file(&dir.join("generated.stream"), g.to_text())?;
            let _ = writeln!(
                say,
                "generated {} tokens after a {}-token prompt",
                g.len() - prompt.len(),
                prompt.len()
            );
            let _ = writeln!(say, "blocks: {}", blocks(&g.tokens[prompt.len()..]));
        }
        Command::InspectTimeline { stream } => {
            let s = match stream {
                Some(p) => read_stream(&p)?,
                None => InterleavedStream::from_tokens(vec![
                    Token::new(0, Modality::Speech, 0.0),
                    Token::new(0, Modality::Face, 0.04),
                    Token::new(0, Modality::Speech, 0.08),
                ]),
            };
            let opts = timeline::TimelineOptions {
                integer_motion: run.model.integer_rope,
                fallback_interval: Some(1.0 / run.model.rate_speech),
            };
            let tl = timeline::assign(&s, &run.model.affine, opts).map_err(runtime)?;
            let mut table = String::from("pos\tmodality\tu\ts\ts_hat\n");
            for (i, tok) in s.tokens.iter().enumerate() {
                let _ = writeln!(
                    table,
                    "{i}\t{}\t{:.6}\t{}\t{}",
                    tok.modality, tok.t, tl.s[i], tl.s_hat[i]
                );
            }
            write_file(&dir.join("timeline.tsv"), &table)?;
            say.push_str(&table);
        }
        Command::GradCheck { samples, eps } => {
            let r = grad_check(&run.model, samples, eps, run.seed).map_err(runtime)?;
            write_file(&dir.join("gradcheck.tsv"), r.to_text())?;
            let zero = r.structurally_zero();
            let _ = writeln!(
                say,
                "checked {} groups, {} structurally zero",
                r.groups.len() - zero.len(),
                zero.len()
            );
            let _ = writeln!(say, "max relative error {:.3e}", r.max_rel);
            let _ = writeln!(say, "{}", if r.pass { "PASS" } else { "FAIL" });
            let _ = out.write_all(say.as_bytes());
            if !r.pass {
                return Err(runtime("gradient check failed"));
            }
            return Ok(());
        }
        Command::Ablate { variants, seeds } => {
            let variants: Vec<Variant> = match variants {
                Some(v) => v
                    .split(',')
                    .map(|s| s.trim().parse::<Variant>())
                    .collect::<Result<_, _>>()
                    .map_err(usage)?,
                None => Variant::ALL.to_vec(),
            };
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|e| usage(format!("bad --seeds: {e}")))?;
            let table = ablate(&run, &variants, &seeds).map_err(|e| match e {
                crate::lab::LabError::TooFewSeeds(_) => usage(e),
                e => runtime(e),
            })?;
            write_file(&dir.join("ablation.tsv"), table.to_tsv())?;
            let summary = table.summary_text();
            write_file(&dir.join("summary.txt"), &summary)?;
            say.push_str(&summary);
        }
    }
    let _ = out.write_all(say.as_bytes());
    Ok(())
}

fn datasets(run: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), Failure> {
    let train = gen_dataset(&run.task).map_err(runtime)?;
    let eval = gen_dataset(&run.eval_task()).map_err(runtime)?;
    let rules = Rules::new(&run.task).map_err(runtime)?;
    let bad = oracle_verify(&rules, &train).len() + oracle_verify(&rules, &eval).len();
    if bad > 0 {
        return Err(runtime(format!("{bad} oracle violations in generated data")));
    }
    Ok((train, eval))
}

/// Streams one after another, each with its header, followed by a
/// `#targets` line of `T`/`R`/`D` role letters.
fn dataset_text(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.stream.to_text());
        out.push_str("#targets ");
        for t in &s.targets {
            out.push(match t {
                Target::Ts => 'T',
                Target::Rule => 'R',
                Target::Distractor => 'D',
            });
        }
        out.push('\n');
    }
    debug_assert!(out.is_empty() || out.starts_with(STREAM_HEADER));
    out
}

fn eval_summary(r: &EvalReport) -> String {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    format!(
        "eval accuracy: face {} body {} motion {} text/speech {}\n",
        fmt(r.face()),
        fmt(r.body()),
        fmt(r.motion()),
        fmt(r.ts_accuracy())
    )
}

fn parse_sampler(s: &str) -> Result<Sampler, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| p.parse::<f64>().map_err(|e| format!("bad sampler '{s}': {e}"));
    match parts.as_slice() {
        ["greedy"] => Ok(Sampler::Greedy),
        ["temperature", t] => Ok(Sampler::Temperature(num(t)?)),
        ["topk", k, t] => Ok(Sampler::TopK {
            k: k.parse().map_err(|e| format!("bad sampler '{s}': {e}"))?,
            temperature: num(t)?,
        }),
        _ => Err(format!(
            "bad sampler '{s}': expected greedy, temperature:T or topk:K:T"
        )),
    }
}

/// Run-length summary such as `text x13, speech x26`.
fn blocks(tokens: &[Token]) -> String {
    let mut runs: Vec<(Modality, usize)> = Vec::new();
    for t in tokens {
        match runs.last_mut() {
            Some((m, n)) if *m == t.modality => *n += 1,
            _ => runs.push((t.modality, 1)),
        }
    }
    runs.iter()
        .map(|(m, n)| format!("{m} x{n}"))
        .collect::<Vec<_>>()
        .join(", ")
}
