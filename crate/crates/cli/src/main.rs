mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stgraph::ablation::run_ablation_suite;
use stgraph::checkpoint::{evaluate_model, load_train_state, save_train_state, Splits, BEST_DIR, LAST_DIR, METADATA_FILE};
use stgraph::graph::{build_graph, GraphDump};
use stgraph::model::{Branch, Variant};
use stgraph::synth::{generate_corpus, read_corpus, write_corpus, VideoSample};
use stgraph::trainer::{init_state, train_from};

use crate::config::{resolve, RunConfig};
use crate::manifest::{output, write_atomic, RunManifest};

/// Error caused by how the tool was invoked rather than by the run itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "stgraph", version, about = "Spatio-temporal graph video captioning on a synthetic corpus")]
struct Cli {
    /// TOML config with [world] and [train] tables, or a run manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override: the world seed for `generate`, the training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override `key=value` or `table.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus as JSONL.
    Generate(GenerateArgs),
    /// Train one variant on the corpus's training split.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a corpus.
    Evaluate(EvaluateArgs),
    /// Train and score several variants over several seeds.
    Ablate(AblateArgs),
    /// Dump the adjacency of one video as JSON.
    InspectGraph(InspectArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output corpus file.
    #[arg(long)]
    out: PathBuf,
    /// Number of videos.
    #[arg(long, default_value_t = 500)]
    n: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory (checkpoints, history, manifest).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    /// Continue from the run directory's last checkpoint if there is one.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint directory, or a run directory (its best checkpoint is used).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "scene")]
    branch: String,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for the table and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants; all seven when absent.
    #[arg(long = "variant", value_delimiter = ',')]
    variants: Vec<String>,
    /// Comma-separated training seeds; three consecutive seeds from the
    /// configured one when absent.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Video id; the first video when absent.
    #[arg(long)]
    video: Option<String>,
    #[arg(long, default_value = "full")]
    variant: String,
    /// Output file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Prints a document to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow!(Usage(e.to_string()))
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::parse(name).map_err(usage)
}

fn load_corpus(path: &Path) -> Result<Vec<VideoSample>> {
    let corpus = read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(corpus)
}

struct Ctx {
    config: RunConfig,
    args: Vec<String>,
    started: Instant,
}

impl Ctx {
    fn manifest(&self, command: &str, seed: u64, outputs: &[&Path], details: serde_json::Value) -> Result<RunManifest> {
        Ok(RunManifest {
            command: command.to_string(),
            args: self.args.clone(),
            config: self.config.clone(),
            seed,
            outputs: outputs.iter().map(|p| output(p)).collect::<Result<_>>()?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: self.started.elapsed().as_secs_f64(),
            details,
        })
    }
}

fn cmd_generate(ctx: &Ctx, a: &GenerateArgs) -> Result<()> {
    if a.n == 0 {
        bail!(Usage("--n must be at least 1".into()));
    }
    let world = &ctx.config.world;
    let corpus = generate_corpus(world, a.n)?;
    write_corpus(&corpus, &a.out)?;
    let splits = Splits::new(&corpus);
    let details = json!({
        "videos": corpus.len(),
        "split": {"train": splits.train.len(), "val": splits.val.len(), "test": splits.test.len()},
    });
    let manifest_path = sibling(&a.out, "manifest.json");
    ctx.manifest("generate", world.seed, &[&a.out], details)?.save(&manifest_path)?;
    println!(
        "wrote {} videos to {} (train {}, val {}, test {})",
        corpus.len(),
        a.out.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

/// `corpus.jsonl` → `corpus.jsonl.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let config = &ctx.config.train;
    let corpus = load_corpus(&a.corpus)?;
    let splits = Splits::new(&corpus);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let state = if a.resume && a.out.join(LAST_DIR).join(METADATA_FILE).exists() {
        let s = load_train_state(&a.out, config).map_err(|e| match e {
            stgraph::Error::Config(m) => usage(m),
            other => other.into(),
        })?;
        println!("resuming after epoch {}", s.epochs_done());
        s
    } else {
        init_state(config, &splits.train)?
    };
    let run = train_from(state, &splits.train, &splits.val, |s| {
        let r = s.history.last().expect("an epoch finished");
        let l = &r.loss;
        println!(
            "epoch {:>3}  total {:.6}  l_o_lang {:.6}  l_s_lang {:.6}  l_distill {:.6}  (lambda_sl {}, lambda_d {})  val_bleu4 {:.4}  val_tok {:.4}",
            r.epoch, l.total, l.l_o_lang, l.l_s_lang, l.l_distill, l.lambda_sl, l.lambda_d, r.val_bleu4, r.val_token_accuracy
        );
        save_train_state(&a.out, s)
    })?;
    let history = a.out.join("history.json");
    write_atomic(&history, serde_json::to_string_pretty(&run.history)?.as_bytes())?;
    let best = a.out.join(BEST_DIR);
    let details = json!({
        "variant": config.variant,
        "best_epoch": run.best_epoch,
        "epochs_run": run.history.len(),
        "best_val_bleu4": run.history[run.best_epoch - 1].val_bleu4,
        "checkpoint": best,
    });
    let params = best.join(stgraph::checkpoint::PARAMS_FILE);
    ctx.manifest("train", config.seed, &[&history, &params], details)?
        .save(&a.out.join("manifest.json"))?;
    println!("best epoch {} (val bleu4 {:.4})", run.best_epoch, run.history[run.best_epoch - 1].val_bleu4);
    Ok(())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.join(METADATA_FILE).exists() {
        path.to_path_buf()
    } else {
        path.join(BEST_DIR)
    }
}

fn cmd_evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let branch = Branch::parse(&a.branch).map_err(usage)?;
    let corpus = load_corpus(&a.corpus)?;
    let splits = Splits::new(&corpus);
    let samples = match a.split.as_str() {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => bail!(Usage(format!("unknown split {other:?}; expected train, val or test"))),
    };
    let report = evaluate_model(&checkpoint_dir(&a.checkpoint), &splits.train, samples, branch)?;
    let m = &report.metric;
    match &a.out {
        Some(path) => {
            write_atomic(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            ctx.manifest("evaluate", ctx.config.train.seed, &[path], json!({"split": a.split, "branch": branch}))?
                .save(&sibling(path, "manifest.json"))?;
            println!(
                "{} videos, branch {}: bleu4 {:.4}  rouge_l {:.4}  token_accuracy {:.4}",
                report.corpus_size,
                branch.name(),
                m.bleu4,
                m.rouge_l,
                m.token_accuracy
            );
        }
        None => emit(&serde_json::to_string_pretty(&report)?)?,
    }
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> Result<()> {
    let variants: Vec<Variant> = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?
    };
    let base_seed = ctx.config.train.seed;
    let seeds = if a.seeds.is_empty() {
        vec![base_seed, base_seed + 1, base_seed + 2]
    } else {
        a.seeds.clone()
    };
    let corpus = load_corpus(&a.corpus)?;
    let splits = Splits::new(&corpus);
    let table = run_ablation_suite(&ctx.config.train, &splits, &variants, &seeds, |run, r| {
        println!(
            "{} seed {}: best epoch {} of {}, test bleu4 {:.4}, val tok {:.4}",
            run.config.variant, r.seed, r.best_epoch, r.epochs_run, r.test.bleu4, r.val.token_accuracy
        );
        Ok(())
    })?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let json_path = a.out.join("ablation.json");
    let text_path = a.out.join("ablation.txt");
    write_atomic(&json_path, table.to_json()?.as_bytes())?;
    let text = table.to_text();
    write_atomic(&text_path, text.as_bytes())?;
    ctx.manifest("ablate", base_seed, &[&json_path, &text_path], json!({"seeds": seeds, "variants": variants}))?
        .save(&a.out.join("manifest.json"))?;
    print!("{text}");
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let variant = parse_variant(&a.variant)?;
    let kind = variant
        .graph_kind()
        .ok_or_else(|| usage(format!("variant {variant} builds no graph")))?;
    let corpus = load_corpus(&a.corpus)?;
    let video = match &a.video {
        Some(id) => corpus
            .iter()
            .find(|v| &v.id == id)
            .ok_or_else(|| anyhow!("no video {id:?} in {}", a.corpus.display()))?,
        None => &corpus[0],
    };
    let dump = GraphDump::from(&build_graph(&video.frames, kind)?);
    let text = serde_json::to_string_pretty(&dump)?;
    match &a.out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => emit(&text)?,
    }
    Ok(())
}

fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    let mut config = resolve(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Generate(_) => config.world.seed = seed,
            _ => config.train.seed = seed,
        }
    }
    if let Command::Train(TrainArgs { variant: Some(v), .. }) = &cli.command {
        config.train.variant = parse_variant(v)?;
    }
    let ctx = Ctx {
        config,
        args,
        started: Instant::now(),
    };
    match &cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
        Command::InspectGraph(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
