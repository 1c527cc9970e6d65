//! `tcl`: data generation, training, evaluation, ablations, λ sweeps,
//! gradient checks and memory inspection.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tcl_core::encoders::{Architecture, EncoderPair};
use tcl_core::gradcheck::{self, LossKind};
use tcl_core::harness::{self, Cell};
use tcl_core::membank;
use tcl_core::par::{self, Exec};
use tcl_core::synthdata::{self, Suite};
use tcl_core::trainer::{self, metrics_to_csv, TrainConfig, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "tcl", version, about = "Contrastive domain adaptation on synthetic multi-domain data")]
struct Cli {
    /// Full config file (`key = value` lines, every key required).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads for the data-parallel kernels.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Per-run overrides, applied on top of the config file or the suite defaults.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    suite: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    /// Any config key, e.g. `--set tau=0.1` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write every domain of a suite as dataset files.
    GenData {
        #[command(flatten)]
        overrides: Overrides,
        /// Also write a CSV mirror of each file.
        #[arg(long)]
        csv: bool,
    },
    /// Train one run: manifest, metrics, checkpoint and memory dump.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Accuracy of a checkpoint's query classifier.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the config's target domain.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Component and variant ablations over several seeds.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        seeds: SeedArgs,
        /// Comma-separated cells (default: tcl,wo-tar,wo-tcl,idl,icdl).
        #[arg(long)]
        cells: Option<String>,
    },
    /// Target accuracy across λ values.
    SweepLambda {
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        seeds: SeedArgs,
        /// Comma-separated λ values (default: 0, 0.1, ..., 1).
        #[arg(long)]
        grid: Option<String>,
    },
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, hide = true, value_name = "LOSS")]
        inject_sign_flip: Option<String>,
    },
    /// Validate and print the memory dump of a training run.
    InspectMemory {
        /// Run directory written by `train` (defaults to `--out`).
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
        #[arg(long)]
        domain: Option<usize>,
    },
}

#[derive(Args, Clone)]
struct SeedArgs {
    /// Number of seeds, counting up from `--seed` (or 0).
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Explicit comma-separated seeds; overrides `--seeds`.
    #[arg(long, value_name = "LIST")]
    seed_list: Option<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else if matches!(e, TrainError::Config(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<trainer::ConfigError> for Failure {
    fn from(e: trainer::ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn build_config(cli: &Cli, o: &Overrides) -> Result<TrainConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let mut cfg = TrainConfig::parse(&text)?;
            if let Some(s) = &o.suite {
                cfg.set("suite", s)?;
            }
            cfg
        }
        None => {
            let suite = match &o.suite {
                Some(s) => Suite::parse(s).ok_or_else(|| Failure::Usage(format!("unknown suite `{s}`")))?,
                None => Suite::Digits5,
            };
            TrainConfig::defaults(suite)
        }
    };
    let named = [("variant", &o.variant), ("lambda", &o.lambda), ("epochs", &o.epochs), ("samples_per_domain", &o.samples)];
    for (key, value) in named {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("`--set {kv}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Marks the start of the config snapshot inside a manifest.
const CONFIG_MARKER: &str = "--- config";

fn manifest(command: &str, cfg: &TrainConfig, out: &Path) -> String {
    let text = cfg.to_text();
    format!(
        "command = {command}\nsuite = {}\nvariant = {}\nseed = {}\nout = {}\nconfig_sha256 = {}\n{CONFIG_MARKER}\n{text}",
        cfg.get("suite"),
        cfg.get("variant"),
        cfg.seed,
        out.display(),
        sha256_hex(text.as_bytes()),
    )
}

fn read_manifest_config(dir: &Path) -> Result<TrainConfig, Failure> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let body = text
        .split_once(&format!("{CONFIG_MARKER}\n"))
        .map(|(_, b)| b)
        .ok_or_else(|| Failure::Data(format!("{}: no config section", path.display())))?;
    TrainConfig::parse(body).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn seed_list(cfg: &TrainConfig, args: &SeedArgs) -> Result<Vec<u64>, Failure> {
    match &args.seed_list {
        Some(list) => Ok(harness::parse_seeds(list)?),
        None => Ok((0..args.seeds as u64).map(|i| cfg.seed + i).collect()),
    }
}

fn write_run_metrics(out: &Path, results: &[harness::RunResult], prefix: &str) -> Result<(), Failure> {
    for r in results {
        write(&out.join("metrics").join(format!("{prefix}{}_seed{}.csv", r.label, r.seed)), &r.metrics_csv)?;
    }
    Ok(())
}

fn gen_data(cli: &Cli, o: &Overrides, csv: bool) -> Result<(), Failure> {
    let cfg = build_config(cli, o)?;
    let specs = cfg.suite.domains(cfg.samples_per_domain);
    for (spec, data) in specs.iter().zip(trainer::generate_data(&cfg)) {
        let stem = format!("{}_d{}_{}", cfg.suite.name(), spec.domain_id, spec.name);
        let path = cli.out.join(format!("{stem}.tclds"));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        synthdata::write_dataset(&path, &data).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        if csv {
            write(&cli.out.join(format!("{stem}.csv")), synthdata::to_csv(&data))?;
        }
        println!("{} ({} samples)", path.display(), data.len());
    }
    Ok(())
}

fn train(cli: &Cli, o: &Overrides) -> Result<(), Failure> {
    let cfg = build_config(cli, o)?;
    write(&cli.out.join("manifest.txt"), manifest("train", &cfg, &cli.out))?;
    let mut t = Trainer::new(cfg.clone(), trainer::generate_data(&cfg))?;
    let summary = t.run()?;
    write(&cli.out.join("metrics.csv"), metrics_to_csv(&summary.metrics))?;
    let ckpt = cli.out.join("checkpoint.bin");
    t.pair().save_checkpoint(&ckpt).map_err(|e| Failure::Data(format!("{}: {e}", ckpt.display())))?;
    let mut dump = membank::csv_header(cfg.proj_dim);
    dump.push('\n');
    for bank in t.source_banks().iter().chain([t.target_bank()]) {
        bank.write_csv_rows(&mut dump);
    }
    write(&cli.out.join("memory.csv"), dump)?;
    println!("final target accuracy {:.4} after {} steps", summary.final_accuracy, summary.steps);
    Ok(())
}

fn eval(cli: &Cli, o: &Overrides, checkpoint: &Path, data: Option<&Path>) -> Result<(), Failure> {
    let cfg = build_config(cli, o)?;
    let data = match data {
        Some(p) => synthdata::read_dataset(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?,
        None => trainer::generate_data(&cfg).swap_remove(cfg.target),
    };
    let arch = Architecture::new(data.dim, cfg.proj_dim, cfg.suite.classes());
    let mut pair = EncoderPair::new(arch, cfg.alpha, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Failure::Usage(e.to_string()))?;
    pair.load_checkpoint(checkpoint).map_err(|e| Failure::Data(format!("{}: {e}", checkpoint.display())))?;
    let acc = trainer::evaluate(&pair, &data)?;
    println!("accuracy {acc:.4} on {} samples", data.len());
    Ok(())
}

fn ablate(cli: &Cli, o: &Overrides, seeds: &SeedArgs, cells: Option<&str>) -> Result<(), Failure> {
    let cfg = build_config(cli, o)?;
    let seeds = seed_list(&cfg, seeds)?;
    let cells: Vec<Cell> = match cells {
        Some(list) => list
            .split(',')
            .map(|c| Cell::parse(c.trim()).ok_or_else(|| Failure::Usage(format!("unknown cell `{c}`"))))
            .collect::<Result<_, _>>()?,
        None => Cell::ABLATION.to_vec(),
    };
    write(&cli.out.join("manifest.txt"), manifest("ablate", &cfg, &cli.out))?;
    let results = harness::run_cells(&cfg, &cells, &seeds, Exec::current())?;
    write_run_metrics(&cli.out, &results, "")?;
    let csv = harness::ablation_csv(&results);
    write(&cli.out.join("ablation.csv"), &csv)?;
    for s in harness::summarize(&results) {
        println!("{:<20} mean {:.4} std {:.4} over {} seeds", s.label, s.mean, s.std, s.runs);
    }
    Ok(())
}

fn sweep(cli: &Cli, o: &Overrides, seeds: &SeedArgs, grid: Option<&str>) -> Result<(), Failure> {
    let cfg = build_config(cli, o)?;
    let seeds = seed_list(&cfg, seeds)?;
    let grid = match grid {
        Some(list) => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Failure::Usage(format!("bad λ `{v}`"))))
            .collect::<Result<Vec<_>, _>>()?,
        None => harness::lambda_grid(),
    };
    write(&cli.out.join("manifest.txt"), manifest("sweep-lambda", &cfg, &cli.out))?;
    let results = harness::run_sweep(&cfg, &grid, &seeds, Exec::current())?;
    write_run_metrics(&cli.out, &results, "lambda-")?;
    let csv = harness::sweep_csv(&results);
    write(&cli.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(instances: usize, flip: Option<&str>) -> Result<(), Failure> {
    let flip = match flip {
        Some(name) => Some(LossKind::parse(name).ok_or_else(|| Failure::Usage(format!("unknown loss `{name}`")))?),
        None => None,
    };
    let reports = gradcheck::check_all(instances, 0, flip).map_err(|e| Failure::Numeric(e.to_string()))?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed_above_noise()).map(|r| r.loss.name()).collect();
    if failed.is_empty() {
        println!("all {} losses agree with central differences", reports.len());
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn inspect_memory(cli: &Cli, run: Option<&Path>, domain: Option<usize>) -> Result<(), Failure> {
    let dir = run.unwrap_or(&cli.out);
    let cfg = read_manifest_config(dir)?;
    let path = dir.join("memory.csv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |line: usize, why: String| Failure::Data(format!("{}:{line}: {why}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != membank::csv_header(cfg.proj_dim) {
        return Err(bad(1, "unexpected header".into()));
    }
    let classes = cfg.suite.classes();
    let mut counts: Vec<(usize, usize)> = Vec::new();
    let mut kept = vec![header.to_string()];
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + cfg.proj_dim {
            return Err(bad(n + 2, format!("{} fields", fields.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(n + 2, format!("bad integer `{s}`")));
        let (d, label) = (int(fields[1])?, int(fields[2])?);
        if label >= classes {
            return Err(bad(n + 2, format!("label {label} outside 0..{classes}")));
        }
        let key = fields[3..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(n + 2, format!("bad value `{s}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > membank::KEY_NORM_TOL {
            return Err(bad(n + 2, format!("key norm {norm}")));
        }
        match counts.iter_mut().find(|(dd, _)| *dd == d) {
            Some((_, c)) => *c += 1,
            None => counts.push((d, 1)),
        }
        if domain.is_none_or(|want| want == d) {
            kept.push(line.to_string());
        }
    }
    for (d, c) in &counts {
        eprintln!("domain {d}: {c} entries");
    }
    println!("{}", kept.join("\n"));
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        par::init_threads(n).map_err(Failure::Usage)?;
    }
    match &cli.command {
        Command::GenData { overrides, csv } => gen_data(cli, overrides, *csv),
        Command::Train { overrides } => train(cli, overrides),
        Command::Eval { overrides, checkpoint, data } => eval(cli, overrides, checkpoint, data.as_deref()),
        Command::Ablate { overrides, seeds, cells } => ablate(cli, overrides, seeds, cells.as_deref()),
        Command::SweepLambda { overrides, seeds, grid } => sweep(cli, overrides, seeds, grid.as_deref()),
        Command::Gradcheck { instances, inject_sign_flip } => gradcheck(*instances, inject_sign_flip.as_deref()),
        Command::InspectMemory { run, domain } => inspect_memory(cli, run.as_deref(), *domain),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}
