mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use unimp::baselines::{impute_knni, impute_mean_mode};
use unimp::infer::{impute, write_provenance, InferConfig, DEFAULT_MAX_LEN};
use unimp::masking::{simulate, Mechanism, MissSpec, UnitMatrix};
use unimp::metrics::{evaluate, render_report, RougeVariant};
use unimp::model::UnimpModel;
use unimp::scaler::Scalers;
use unimp::table::{load_csv, to_csv_bytes, write_atomic, Schema};
use unimp::train::{finetune, pretrain, TrainConfig, DEFAULT_FINETUNE_EPOCHS};
use unimp::{ColumnKind, Error, MaskMatrix, Table};

const SEED_ENV: &str = "UNIMP_SEED";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    NonFinite(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonFinite(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::NonFinite(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) | Error::Csv(_) => CliError::Io(msg),
            Error::NonFinite(_) => CliError::NonFinite(msg),
            _ => CliError::Usage(msg),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "unimp", version, about = "Mixed-type tabular imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate missingness and write a 0/1 mask CSV.
    Mask(MaskArgs),
    /// Train a fresh model on one or more tables.
    Pretrain(TrainArgs),
    /// Continue training a checkpoint on one table.
    Finetune(FinetuneArgs),
    /// Fill the cells a mask hides.
    Impute(ImputeArgs),
    /// Score an imputed table against the truth.
    Evaluate(EvaluateArgs),
    /// Compare analytic and numeric gradients of the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    input: PathBuf,
    /// `name:kind` lines; kinds are inferred when omitted.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum)]
    mechanism: MechanismArg,
    #[arg(long)]
    rate: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of columns used as logistic causes (mar).
    #[arg(long, default_value_t = 0.3)]
    cause_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Mcar,
    Mar,
    Mnar,
}

impl From<MechanismArg> for Mechanism {
    fn from(m: MechanismArg) -> Self {
        match m {
            MechanismArg::Mcar => Mechanism::Mcar,
            MechanismArg::Mar => Mechanism::Mar,
            MechanismArg::Mnar => Mechanism::Mnar,
        }
    }
}

#[derive(Args)]
struct Overrides {
    /// `key = value` file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Accepted for interface compatibility; training runs on one thread.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// A CSV file or a directory of CSV files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Unimp,
    Mean,
    Knni,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// 0 marks a cell to impute; defaults to the input's own missing cells.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Required for `--method unimp`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Unimp)]
    method: Method,
    /// Neighbours for `--method knni`.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
    /// Replace graph features by zeros.
    #[arg(long)]
    zero_graph: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RougeArg {
    /// recall = overlap / |generated|
    AsPrinted,
    /// recall = overlap / |reference|
    Standard,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    imputed: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Checkpoint whose backbone embeds text for cosine similarity; a fresh
    /// backbone over the truth's vocabulary is used otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RougeArg::AsPrinted)]
    rouge: RougeArg,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn schema_kinds(path: &Option<PathBuf>) -> CliResult<Option<Vec<ColumnKind>>> {
    Ok(match path {
        Some(p) => Some(Schema::load(p)?.kinds()),
        None => None,
    })
}

fn load_table(path: &Path, schema: &Option<PathBuf>) -> CliResult<Table> {
    Ok(load_csv(path, schema_kinds(schema)?.as_deref())?)
}

fn load_tables(data: &Path, schema: &Option<PathBuf>) -> CliResult<Vec<Table>> {
    if !data.is_dir() {
        return Ok(vec![load_table(data, schema)?]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(data)
        .map_err(|e| CliError::Io(format!("{}: {e}", data.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("{} holds no .csv file", data.display())));
    }
    files.iter().map(|f| load_table(f, schema)).collect()
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Flag > config file > `UNIMP_SEED` > 0, and likewise for the other keys
/// minus the environment step.
fn train_config(o: &Overrides, base: TrainConfig) -> CliResult<TrainConfig> {
    let mut cfg = base;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = &o.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        config::apply(&mut cfg, &config::parse(&text)?)?;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.kappa {
        cfg.kappa = v;
    }
    if let Some(v) = o.delta {
        cfg.delta = v;
    }
    if o.chunk_size.is_some() {
        cfg.chunk_size = o.chunk_size;
    }
    if o.batch_size.is_some() {
        cfg.batch_size = o.batch_size;
    }
    if o.workers == 0 {
        return Err(CliError::Usage("invalid parameter `workers`: must be positive".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_mask(a: MaskArgs) -> CliResult<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    if !(a.rate > 0.0 && a.rate < 1.0) {
        return Err(CliError::Usage(format!("invalid parameter `rate`: {} is outside (0, 1)", a.rate)));
    }
    let t = load_table(&a.input, &a.schema)?;
    let scalers = Scalers::fit(&t, &t.observed_mask())?;
    let mut spec = MissSpec::new(a.mechanism.into(), a.rate, seed);
    spec.cause_fraction = a.cause_fraction;
    let mask = simulate(&UnitMatrix::from_table(&t, &scalers), &spec)?;
    write_atomic(&a.out, mask.to_csv_string().as_bytes())?;
    println!("missing_fraction,{}", mask.missing_fraction());
    Ok(())
}

fn report_training(report: &unimp::train::TrainReport, cfg: &TrainConfig, out: &Path) -> CliResult<()> {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    report.write_manifest(cfg, sidecar(out, ".manifest"))?;
    let last = report.epochs.last().and_then(|e| e.loss);
    println!(
        "epochs,{}\nsteps,{}\nfinal_loss,{}",
        report.epochs.len(),
        report.steps,
        last.map_or("nan".into(), |l| format!("{l:e}"))
    );
    Ok(())
}

fn cmd_pretrain(a: TrainArgs) -> CliResult<()> {
    let mut base = TrainConfig::default();
    if let Some(l) = a.layers {
        base.layers = l;
    }
    if let Some(d) = a.dim {
        base.dim = d;
    }
    let cfg = train_config(&a.overrides, base)?;
    let tables = load_tables(&a.data, &a.schema)?;
    let (model, report) = pretrain(&tables, &cfg)?;
    model.save(&a.out)?;
    report_training(&report, &cfg, &a.out)
}

fn cmd_finetune(a: FinetuneArgs) -> CliResult<()> {
    let model = UnimpModel::load(&a.ckpt)?;
    let base = TrainConfig {
        epochs: DEFAULT_FINETUNE_EPOCHS,
        dim: model.config.dim,
        layers: model.config.layers,
        seed: model.config.seed,
        ..TrainConfig::default()
    };
    let cfg = train_config(&a.overrides, base)?;
    let mut tables = load_tables(&a.data, &a.schema)?;
    if tables.len() != 1 {
        return Err(CliError::Usage("finetune takes exactly one table".into()));
    }
    let (tuned, report) = finetune(&model, &tables.remove(0), &cfg)?;
    tuned.save(&a.out)?;
    report_training(&report, &cfg, &a.out)
}

fn load_mask(path: &Option<PathBuf>, t: &Table) -> CliResult<MaskMatrix> {
    match path {
        Some(p) => {
            let m = MaskMatrix::load(p)?;
            t.check_mask(&m)?;
            Ok(m)
        }
        None => Ok(t.observed_mask()),
    }
}

fn cmd_impute(a: ImputeArgs) -> CliResult<()> {
    if a.workers == 0 {
        return Err(CliError::Usage("invalid parameter `workers`: must be positive".into()));
    }
    let t = load_table(&a.input, &a.schema)?;
    let mask = load_mask(&a.mask, &t)?;
    let kept = mask.intersect(&t.observed_mask())?;
    let filled = match a.method {
        Method::Mean => impute_mean_mode(&t, &kept)?,
        Method::Knni => impute_knni(&t, &kept, a.k)?,
        Method::Unimp => {
            let ckpt = a
                .ckpt
                .as_ref()
                .ok_or_else(|| CliError::Usage("`--method unimp` needs `--ckpt`".into()))?;
            let model = UnimpModel::load(ckpt)?;
            let cfg = InferConfig {
                chunk_size: a.chunk_size,
                max_len: a.max_len,
                zero_graph: a.zero_graph,
            };
            impute(&t, &mask, &model, &cfg)?.table
        }
    };
    write_atomic(&a.out, &to_csv_bytes(&filled)?)?;
    write_provenance(&kept, sidecar(&a.out, ".provenance.csv"))?;
    println!("imputed_cells,{}", kept.count_missing());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let truth = load_table(&a.truth, &a.schema)?;
    let imputed = load_csv(&a.imputed, Some(truth.kinds()))?;
    let mask = MaskMatrix::load(&a.mask)?;
    let encoder = match &a.ckpt {
        Some(p) => UnimpModel::load(p)?.encoder,
        None => {
            let cfg = unimp::model::ModelConfig {
                dim: unimp::model::DEFAULT_DIM,
                layers: 1,
                seed: env_seed()?.unwrap_or(0),
            };
            UnimpModel::new(unimp::model::vocab_for(&[&truth]), cfg)?.encoder
        }
    };
    let variant = match a.rouge {
        RougeArg::AsPrinted => RougeVariant::AsPrinted,
        RougeArg::Standard => RougeVariant::Standard,
    };
    let lines = evaluate(&truth, &imputed, &mask, &encoder, variant)?;
    let report = render_report(&lines);
    write_atomic(&a.report, report.as_bytes())?;
    print!("{report}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let r = unimp::gradcheck::run(a.dim, a.layers, seed)?;
    println!("checked,{}\nworst,{:e}\nworst_at,{}[{}]", r.checked, r.worst, r.worst_at.0, r.worst_at.1);
    if r.worst < a.tolerance {
        Ok(())
    } else {
        Err(CliError::NonFinite(format!(
            "gradient mismatch {:e} exceeds tolerance {:e}",
            r.worst, a.tolerance
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mask(a) => cmd_mask(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
