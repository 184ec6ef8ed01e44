mod error;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dcpg_core::harness::dataset::{export_dataset, import_dataset, DatasetSpec};
use dcpg_core::harness::log::write_record;
use dcpg_core::harness::{
    evaluate, generate_dataset, run_ablation, standard_grid, train_with, Checkpoint, EvalReport,
    LogRecord, Model, ModelConfig, Split, TrainOptions,
};
use dcpg_core::verify::{run_suite, Suite};

use error::{CliError, CliResult};

const DATA_ENV: &str = "DCPG_DATA_DIR";

#[derive(Parser)]
#[command(name = "dcpg", version, about = "Policy-gradient attention for image-text matching")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-feature dataset.
    Gen(GenArgs),
    /// Train a model and write checkpoints plus a metric log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run the ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Run verification suites (default: all).
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, env = DATA_ENV)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    distractor: Option<f64>,
    #[arg(long)]
    clutter: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    val_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// Config sources shared by `train` and `ablate`, applied as
/// default < file < `--set` < named flags.
#[derive(Args)]
struct ConfigArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// off, discrete-only, continuous-only or compound.
    #[arg(long)]
    pg: Option<String>,
    /// r1, ap or r1+ap.
    #[arg(long)]
    reward: Option<String>,
    /// Attention scale.
    #[arg(long)]
    lambda: Option<f64>,
    /// Baseline weight.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::from_file(p)
                .map_err(|e| CliError::User(format!("{}: {e}", p.display())))?,
            None => ModelConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::User(format!("--set expects KEY=VALUE, got `{s}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let named: [(&str, Option<String>); 9] = [
            ("pg", self.pg.clone()),
            ("reward", self.reward.clone()),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("margin", self.margin.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    /// Run directory for manifest, metric log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Record elapsed milliseconds in the metric log.
    #[arg(long)]
    wall_time: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Comma-separated cell names; defaults to the whole grid.
    #[arg(long, value_delimiter = ',')]
    cells: Vec<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write the table and per-run records as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run: gradcheck, distributions, metrics, bandit, baseline, all.
    suites: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Artifacts {
    metrics: PathBuf,
    best: PathBuf,
    last: PathBuf,
    config: PathBuf,
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    version: String,
    config: ModelConfig,
    dataset: PathBuf,
    fingerprint: String,
    artifacts: Artifacts,
    started_unix: u64,
    finished_unix: Option<u64>,
    best_epoch: Option<usize>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.is_file() {
        return Err(CliError::User(format!("{} is a file", dir.display())));
    }
    if dir.is_dir() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(CliError::User(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_data(dir: &Path) -> CliResult<dcpg_core::harness::SyntheticDataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::User(format!(
            "{} has no dataset manifest; run `dcpg gen` first",
            dir.display()
        )));
    }
    import_dataset(dir).map_err(|e| CliError::User(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let mut spec = DatasetSpec::default();
    macro_rules! take {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    take!(
        classes, seed, regions, tokens, dim, vocab, noise, distractor, clutter,
        train_per_class, val_per_class, test_per_class
    );
    spec.validate()?;
    prepare_dir(&a.out, a.force)?;
    let ds = generate_dataset(&spec)?;
    let m = export_dataset(&ds, &a.out)?;
    println!(
        "wrote {} ({} classes, {}/{}/{} instances, seed {}, fingerprint {})",
        a.out.display(),
        spec.classes,
        m.instances[0],
        m.instances[1],
        m.instances[2],
        spec.seed,
        m.fingerprint
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let data = load_data(&a.data)?;
    prepare_dir(&a.out, a.force)?;
    let artifacts = Artifacts {
        metrics: a.out.join("metrics.jsonl"),
        best: a.out.join("best.json"),
        last: a.out.join("last.json"),
        config: a.out.join("config.txt"),
    };
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        dataset: a.data.clone(),
        fingerprint: data.fingerprint(),
        artifacts,
        started_unix: now(),
        finished_unix: None,
        best_epoch: None,
    };
    let manifest_path = a.out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    fs::write(&manifest.artifacts.config, cfg.to_text())?;

    let mut log = BufWriter::new(fs::File::create(&manifest.artifacts.metrics)?);
    let opts = TrainOptions {
        wall_time: a.wall_time,
    };
    let outcome = train_with(&cfg, &data, opts, |r| {
        write_record(&mut log, r)?;
        log.flush()?;
        if let LogRecord::Eval {
            epoch, report, best, ..
        } = r
        {
            println!(
                "epoch {epoch:>3}  val R@1 i2t {:.3} t2i {:.3}{}",
                report.i2t[0],
                report.t2i[0],
                if *best { "  *" } else { "" }
            );
        }
        Ok(())
    })
    .map_err(|e| CliError::from(e).context("training"))?;
    drop(log);

    write_json(&manifest.artifacts.best, &outcome.best)?;
    write_json(&manifest.artifacts.last, &outcome.last)?;
    manifest.finished_unix = Some(now());
    manifest.best_epoch = Some(outcome.best.epoch);
    write_json(&manifest_path, &manifest)?;
    println!(
        "best epoch {} (val R@1 i2t {:.3} t2i {:.3}); artifacts in {}",
        outcome.best.epoch,
        outcome.best_report.i2t[0],
        outcome.best_report.t2i[0],
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    checkpoint: &'a Path,
    epoch: usize,
    split: Split,
    report: &'a EvalReport,
}

fn render_report(split: Split, r: &EvalReport) -> String {
    let mut out = format!("split {} (n = {})\n", split.name(), r.n);
    out.push_str("direction      R@1     R@5    R@10\n");
    for (name, v) in [("image->text", r.i2t), ("text->image", r.t2i)] {
        out.push_str(&format!("{name:<12} {:>6.3}  {:>6.3}  {:>6.3}\n", v[0], v[1], v[2]));
    }
    out
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let split: Split = a.split.parse()?;
    let text = fs::read_to_string(&a.checkpoint)
        .map_err(|e| CliError::User(format!("{}: {e}", a.checkpoint.display())))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::User(format!("{}: {e}", a.checkpoint.display())))?;
    let data = load_data(&a.data)?;
    let model = Model::from_checkpoint(&ck)?;
    model.check_data(&data.spec)?;
    let report = evaluate(&model, data.split(split))?;
    print!("{}", render_report(split, &report));
    let record = EvalRecord {
        checkpoint: &a.checkpoint,
        epoch: ck.epoch,
        split,
        report: &report,
    };
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let base = a.config.resolve()?;
    let data = load_data(&a.data)?;
    let mut grid = standard_grid();
    if !a.cells.is_empty() {
        let names: Vec<String> = grid.iter().map(|c| c.name.clone()).collect();
        if let Some(bad) = a.cells.iter().find(|c| !names.contains(c)) {
            return Err(CliError::User(format!(
                "unknown cell `{bad}`; available cells: {}",
                names.join(", ")
            )));
        }
        grid.retain(|c| a.cells.contains(&c.name));
    }
    let table = run_ablation(&base, &data, &grid, &a.seeds, a.jobs)?;
    print!("{}", table.render());
    if let Some(path) = &a.json {
        write_json(path, &table)?;
    }
    if table.rows.iter().any(|r| r.failures == r.runs) {
        return Err(CliError::Internal("every run of at least one cell failed".into()));
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CliResult<()> {
    let suites: Vec<Suite> = if a.suites.is_empty() || a.suites.iter().any(|s| s == "all") {
        Suite::ALL.to_vec()
    } else {
        a.suites.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    };
    let mut failed = 0;
    for s in suites {
        let report = run_suite(s);
        print!("{}", report.render());
        failed += report.checks.iter().filter(|c| !c.passed).count();
    }
    if failed > 0 {
        return Err(CliError::Verify(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
