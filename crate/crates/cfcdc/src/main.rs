//! Command-line surface. Exit codes: 0 success, 1 execution failure
//! (`query` only), 2 data error, 3 training divergence, 64 usage.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfcdc::checkpoint::{
    cfcc_from_checkpoint, cfcc_to_checkpoint, cfcd_from_checkpoint, cfcd_to_checkpoint,
    file_digest, Checkpoint,
};
use cfcdc::config::RunConfig;
use cfcdc::pipeline::{self, ModelBundle};
use cfcdc::prepare::{self, Dataset};
use cfcdc::train::{self, TrainError};
use cfcdc::{config, ingest};
use cfcdc_core::data::Vocabulary;
use cfcdc_core::synth::synth_dataset;
use cfcdc_core::{sql, ClauseRole, SqlQuery, TableSchema};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_EXEC: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "cfcdc", about = "Clause-decoupled NL2SQL pipeline", version)]
struct Cli {
    /// TOML configuration file; CLI flags override it, CFCDC_* environment
    /// variables override both.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Select,
    Where,
    Sw,
}

impl RoleArg {
    fn role(self) -> ClauseRole {
        match self {
            RoleArg::Select => ClauseRole::Select,
            RoleArg::Where => ClauseRole::Where,
            RoleArg::Sw => ClauseRole::SelectWhere,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
}

#[derive(Args)]
struct BundleArgs {
    /// Select-clause checkpoint.
    #[arg(long)]
    select: PathBuf,
    /// Where-clause checkpoint.
    #[arg(long = "where")]
    whr: PathBuf,
    /// Select+where union checkpoint.
    #[arg(long)]
    sw: PathBuf,
    /// Coupling checkpoint; omit to run the clause modules alone.
    #[arg(long)]
    couple: Option<PathBuf>,
    /// Voting weight on the coupling module.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize a dataset (or generate a synthetic one) into a cache directory.
    Prepare {
        /// Generate this many synthetic training examples instead of reading files.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        tables: Option<PathBuf>,
        /// Cache directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one clause module on a prepared cache.
    Train {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Disable the expert block; heads read the encoder state directly.
        #[arg(long)]
        no_ifcd: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the coupling module on top of three frozen clause checkpoints.
    Couple {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        select: PathBuf,
        #[arg(long = "where")]
        whr: PathBuf,
        #[arg(long)]
        sw: PathBuf,
        /// Keep training the clause encoders during the coupling stage;
        /// updated clause checkpoints are written next to the output.
        #[arg(long)]
        finetune_all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split: LF, EX, and per-component accuracy.
    Evaluate {
        #[arg(long)]
        cache: PathBuf,
        #[command(flatten)]
        bundle: BundleArgs,
        #[arg(long, value_enum, default_value = "dev")]
        split: SplitArg,
        /// Execution-guided decoding over the top-k joint candidates.
        #[arg(long)]
        eg: bool,
        #[arg(long)]
        k: Option<usize>,
        /// Report file (key=value text; a .json twin is written alongside).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-example prediction records (JSONL).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Predict and execute a single question against one table.
    Query {
        #[arg(long)]
        question: String,
        /// Tables file (JSONL); the table id defaults to the only table.
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        table_id: Option<String>,
        #[command(flatten)]
        bundle: BundleArgs,
        #[arg(long)]
        eg: bool,
        #[arg(long)]
        k: Option<usize>,
    },
}

enum AppError {
    Usage(String),
    Data(String),
    Diverged(String),
    Exec(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Data(_) => EXIT_DATA,
            AppError::Diverged(_) => EXIT_DIVERGED,
            AppError::Exec(_) => EXIT_EXEC,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Diverged(m) | AppError::Exec(m) => m,
        }
    }
}

macro_rules! data_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for AppError {
            fn from(e: $t) -> Self {
                AppError::Data(e.to_string())
            }
        }
    )*};
}
data_error_from!(
    ingest::IngestError,
    prepare::PrepareError,
    cfcdc::checkpoint::CheckpointError,
    config::ConfigError,
    pipeline::PipelineError,
    std::io::Error
);

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => AppError::Diverged(e.to_string()),
            other => AppError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, AppError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::Prepare { synthetic, train, dev, tables, out } => {
            cmd_prepare(&cfg, synthetic, train, dev, tables, &out)
        }
        Cmd::Train { cache, role, no_ifcd, out } => {
            cmd_train(&cfg, &cache, role.role(), !no_ifcd, &out)
        }
        Cmd::Couple { cache, select, whr, sw, finetune_all, out } => {
            cmd_couple(&cfg, &cache, &select, &whr, &sw, finetune_all, &out)
        }
        Cmd::Evaluate { cache, bundle, split, eg, k, report, predictions } => cmd_evaluate(
            &cfg,
            &cache,
            &bundle,
            split,
            eg,
            k,
            report.as_deref(),
            predictions.as_deref(),
        ),
        Cmd::Query { question, tables, table_id, bundle, eg, k } => {
            cmd_query(&cfg, &question, &tables, table_id.as_deref(), &bundle, eg, k)
        }
    }
}

fn cmd_prepare(
    cfg: &RunConfig,
    synthetic: Option<usize>,
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    tables: Option<PathBuf>,
    out: &Path,
) -> Result<(), AppError> {
    let (store, train_ex, dev_ex) = match (synthetic, train, tables) {
        (Some(n), None, None) => {
            if n == 0 {
                return Err(AppError::Usage("--synthetic needs at least 1 example".into()));
            }
            synth_dataset(cfg.seed, n, (n / 50).clamp(2, 24))
        }
        (None, Some(train_path), Some(tables_path)) => {
            let store = ingest::load_tables(&tables_path)?;
            let train_ex = ingest::load_examples(&train_path, &store)?;
            let dev_ex = match dev {
                Some(dev_path) => ingest::load_examples(&dev_path, &store)?,
                None => Vec::new(),
            };
            (store, train_ex, dev_ex)
        }
        _ => {
            return Err(AppError::Usage(
                "pass either --synthetic N or both --train and --tables".into(),
            ))
        }
    };
    let ds = prepare::build_dataset(store, train_ex, dev_ex, cfg.encoder.max_seq_len);
    prepare::save_dataset(out, &ds)?;
    println!(
        "prepared {} train / {} dev examples, {} tables, vocab {} -> {}",
        ds.train.len(),
        ds.dev.len(),
        ds.tables.len(),
        ds.vocab.size(),
        out.display()
    );
    Ok(())
}

fn checkpoint_meta(cfg: &RunConfig, ds: &Dataset) -> serde_json::Value {
    serde_json::json!({
        "vocab": ds.vocab,
        "max_seq_len": cfg.encoder.max_seq_len,
        "seed": cfg.seed,
    })
}

fn cmd_train(
    cfg: &RunConfig,
    cache: &Path,
    role: ClauseRole,
    use_ifcd: bool,
    out: &Path,
) -> Result<(), AppError> {
    let ds = prepare::load_dataset(cache)?;
    let use_ifcd = use_ifcd && cfg.ifcd.enabled;
    let module = train::train_role(&ds, cfg, role, use_ifcd, &mut std::io::stderr())?;
    cfcd_to_checkpoint(&module, checkpoint_meta(cfg, &ds)).save(out)?;
    println!("{} checkpoint -> {} ({})", role.name(), out.display(), file_digest(out)?);
    Ok(())
}

fn load_role_checkpoint(path: &Path, role: &str) -> Result<(Checkpoint, String), AppError> {
    if !path.exists() {
        return Err(AppError::Data(format!(
            "missing {role} checkpoint: {}",
            path.display()
        )));
    }
    let digest = file_digest(path)?;
    Ok((Checkpoint::load(path)?, digest))
}

fn cmd_couple(
    cfg: &RunConfig,
    cache: &Path,
    select: &Path,
    whr: &Path,
    sw: &Path,
    finetune_all: bool,
    out: &Path,
) -> Result<(), AppError> {
    let ds = prepare::load_dataset(cache)?;
    let mut modules = Vec::new();
    let mut digests = serde_json::Map::new();
    for (path, role) in [(select, "select"), (whr, "where"), (sw, "sw")] {
        let (ckpt, digest) = load_role_checkpoint(path, role)?;
        modules.push(cfcd_from_checkpoint(&ckpt, path)?);
        digests.insert(role.to_string(), serde_json::Value::String(digest));
    }
    let [mut m_sel, mut m_whr, mut m_sw] = <[_; 3]>::try_from(modules).ok().unwrap();
    let log = &mut std::io::stderr();
    let cfcc = if finetune_all {
        let cfcc =
            train::train_cfcc_finetune_all(&ds, cfg, [&mut m_sel, &mut m_whr, &mut m_sw], log)?;
        for (module, suffix) in [(&m_sel, "select"), (&m_whr, "where"), (&m_sw, "sw")] {
            let path = out.with_extension(format!("{suffix}.ckpt"));
            cfcd_to_checkpoint(module, checkpoint_meta(cfg, &ds)).save(&path)?;
            println!("tuned {suffix} checkpoint -> {}", path.display());
        }
        cfcc
    } else {
        train::train_cfcc(&ds, cfg, [&m_sel, &m_whr, &m_sw], log)?
    };
    let meta = serde_json::json!({
        "inputs": digests,
        "seed": cfg.seed,
        "alpha": cfg.voting.alpha,
    });
    cfcc_to_checkpoint(&cfcc, meta).save(out)?;
    println!("coupling checkpoint -> {} ({})", out.display(), file_digest(out)?);
    Ok(())
}

fn load_bundle(cfg: &RunConfig, args: &BundleArgs) -> Result<ModelBundle, AppError> {
    let (sel_ckpt, _) = load_role_checkpoint(&args.select, "select")?;
    let (whr_ckpt, _) = load_role_checkpoint(&args.whr, "where")?;
    let (sw_ckpt, _) = load_role_checkpoint(&args.sw, "sw")?;
    let sel = cfcd_from_checkpoint(&sel_ckpt, &args.select)?;
    let whr = cfcd_from_checkpoint(&whr_ckpt, &args.whr)?;
    let sw = cfcd_from_checkpoint(&sw_ckpt, &args.sw)?;
    let mut vocab: Vocabulary = serde_json::from_value(
        sel_ckpt.meta.get("vocab").cloned().unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| AppError::Data(format!("{}: missing vocabulary: {e}", args.select.display())))?;
    vocab.rebuild_index();
    let max_seq_len = sel.encoder.cfg.max_seq_len;
    let cfcc = match &args.couple {
        Some(path) => {
            let (ckpt, _) = load_role_checkpoint(path, "couple")?;
            Some(cfcc_from_checkpoint(&ckpt, path)?)
        }
        None => None,
    };
    Ok(ModelBundle {
        sel,
        whr,
        sw,
        cfcc,
        vocab,
        max_seq_len,
        alpha: args.alpha.unwrap_or(cfg.voting.alpha),
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cfg: &RunConfig,
    cache: &Path,
    bundle_args: &BundleArgs,
    split: SplitArg,
    eg: bool,
    k: Option<usize>,
    report_path: Option<&Path>,
    predictions_path: Option<&Path>,
) -> Result<(), AppError> {
    let ds = prepare::load_dataset(cache)?;
    let bundle = load_bundle(cfg, bundle_args)?;
    let examples = match split {
        SplitArg::Train => &ds.train,
        SplitArg::Dev => &ds.dev,
    };
    let eg_k = eg.then(|| k.unwrap_or(cfg.eg.k));
    let out = pipeline::evaluate_split(&bundle, &ds.tables, examples, eg_k)?;

    let mut lines: Vec<String> = out
        .report
        .lines()
        .iter()
        .map(|(name, v)| format!("{name}={v}"))
        .collect();
    lines.push(format!("lf_without_ex={}", out.lf_without_ex));
    lines.push(format!("eg_exec_failures={}", out.eg_exec_failures));
    let text = lines.join("\n") + "\n";
    print!("{text}");

    if let Some(path) = report_path {
        std::fs::write(path, &text)?;
        let json = serde_json::json!({
            "report": out.report,
            "lf_without_ex": out.lf_without_ex,
            "eg_exec_failures": out.eg_exec_failures,
        });
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&json)?)?;
    }
    if let Some(path) = predictions_path {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for record in &out.records {
            serde_json::to_writer(&mut w, record)?;
            writeln!(w)?;
        }
    }
    if out.lf_without_ex > 0 || out.eg_exec_failures > 0 {
        return Err(AppError::Data(format!(
            "invariant check failed: lf_without_ex={} eg_exec_failures={}",
            out.lf_without_ex, out.eg_exec_failures
        )));
    }
    Ok(())
}

fn pick_table<'a>(
    tables: &'a cfcdc_core::TableStore,
    table_id: Option<&str>,
    path: &Path,
) -> Result<&'a TableSchema, AppError> {
    match table_id {
        Some(id) => tables
            .get(id)
            .ok_or_else(|| AppError::Data(format!("{}: no table {id:?}", path.display()))),
        None if tables.len() == 1 => Ok(tables.values().next().unwrap()),
        None => Err(AppError::Usage(format!(
            "{}: several tables present, pass --table-id",
            path.display()
        ))),
    }
}

fn cmd_query(
    cfg: &RunConfig,
    question: &str,
    tables_path: &Path,
    table_id: Option<&str>,
    bundle_args: &BundleArgs,
    eg: bool,
    k: Option<usize>,
) -> Result<(), AppError> {
    if question.trim().is_empty() {
        return Err(AppError::Usage("question is empty".into()));
    }
    let tables = ingest::load_tables(tables_path)?;
    let schema = pick_table(&tables, table_id, tables_path)?;
    let bundle = load_bundle(cfg, bundle_args)?;
    let prediction: SqlQuery = if eg {
        pipeline::predict_with_eg(&bundle, schema, question, k.unwrap_or(cfg.eg.k))?.query
    } else {
        pipeline::predict_example(&bundle, schema, question)?.query
    };
    let rendered = sql::serialize(&prediction, schema)
        .map_err(|e| AppError::Data(format!("prediction is not renderable: {e:?}")))?;
    println!("{rendered}");
    match sql::execute(&prediction, schema) {
        Ok(result) => {
            println!("{}", render_result(&result));
            Ok(())
        }
        Err(e) => Err(AppError::Exec(format!("execution failed after {rendered}: {e:?}"))),
    }
}

fn render_result(result: &sql::ResultSet) -> String {
    match result {
        sql::ResultSet::Empty => "(empty)".to_string(),
        sql::ResultSet::Scalar(v) => cfcdc_core::data::format_real(*v),
        sql::ResultSet::Cells(cells) => cells
            .iter()
            .map(|c| c.as_text())
            .collect::<Vec<_>>()
            .join(", "),
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Data(e.to_string())
    }
}
