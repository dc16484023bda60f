//! `fedsilo` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 aborted round (missing partner), 4 permission violation.

mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsilo::datagen::{generate_bundles, DatasetBundle, Variant};
use fedsilo::eval::{evaluate, featurize_compounds, fuse, predict, predict_fused, FusionMap, Predictions, TaskScore};
use fedsilo::federation::{run_phase, write_metrics_csv, FederationError, TestSchedule, N_FOLDS};
use fedsilo::model::{load_head, load_trunk, Architecture, ModelParams};
use fedsilo::primitives::{CsrMatrix, Purpose, Seed};
use fedsilo::privacy::{differentiation_experiment, mia_experiment, AttackResult, DifferentiationConfig, MiaConfig};
use serde::Serialize;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("round aborted: {0}")]
    Abort(String),
    #[error("permission violation: {0}")]
    Permission(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config { .. } => 2,
            CliError::Abort(_) => 3,
            CliError::Permission(_) => 4,
        }
    }
}

impl From<FederationError> for CliError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::Config { field, message } => CliError::Config { field, message },
            FederationError::MissingPartner { .. } => CliError::Abort(e.to_string()),
            FederationError::Permission(v) => CliError::Permission(v.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

macro_rules! other_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Other(e.to_string())
            }
        }
    )*};
}

other_from!(
    std::io::Error,
    csv::Error,
    serde_json::Error,
    fedsilo::datagen::BundleError,
    fedsilo::datagen::DatagenError,
    fedsilo::model::ModelError,
    fedsilo::eval::EvalError,
    fedsilo::primitives::CsrError,
    fedsilo::privacy::PrivacyError
);

#[derive(Parser)]
#[command(name = "fedsilo", version, about = "Cross-silo federated multi-task training with masked secure aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory or file, depending on the command.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a machine-readable summary on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Clone, Debug, Default)]
struct DataArgs {
    #[arg(long)]
    partners: Option<usize>,
    /// CLS, CLSAUX, REG or HYB.
    #[arg(long)]
    variant: Option<String>,
    /// bench or standard.
    #[arg(long)]
    corpus: Option<String>,
    /// Compounds per partner.
    #[arg(long)]
    compounds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic bundle directory per partner.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run one phase of federated training.
    Run(Box<RunArgs>),
    /// Run the membership-inference and differentiation experiments.
    Attack(AttackArgs),
    /// Select the best candidate model per task from validation scores.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Validation score file written by `run` (repeatable).
        #[arg(long = "scores", required = true)]
        scores: Vec<PathBuf>,
    },
    /// Apply trained trunk+head stacks to new data.
    Predict(PredictArgs),
    /// Summarize finished runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directory of a finished `run` (repeatable).
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Phase 1 (tune), 2 (retrain) or 3 (final).
    #[arg(long)]
    phase: Option<u8>,
    /// Existing bundle directory from `generate`.
    #[arg(long = "data")]
    data_dir: Option<PathBuf>,
    /// Only `local` (all partners simulated in one process).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long = "batches")]
    batches_per_epoch: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k_fraction: Option<f64>,
    /// data_proportional, uniform or nnz_proportional.
    #[arg(long)]
    weighting: Option<String>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    eval_every: Option<u32>,
    #[arg(long)]
    min_group_size: Option<usize>,
    /// Print per-round training losses to stderr.
    #[arg(long)]
    verbose: bool,
    /// Identifier written into the local validation score files.
    #[arg(long, default_value_t = 0)]
    model_id: u32,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// mia, masked, differentiation or all.
    #[arg(long, default_value = "all")]
    kind: String,
    /// Aggregation sizes for the membership experiment.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    aggregate: Vec<usize>,
    /// Churn group sizes for the differentiation experiment.
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    groups: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Hidden width of the attacked snapshot.
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Bundle directory used as the compound pool.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Trunk checkpoint (repeatable; model ids follow the order given).
    #[arg(long = "trunk", required = true)]
    trunks: Vec<PathBuf>,
    /// Head checkpoint matching each `--trunk`.
    #[arg(long = "head", required = true)]
    heads: Vec<PathBuf>,
    #[arg(long)]
    fusion: Option<PathBuf>,
    /// Output columns to predict, comma separated.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<usize>>,
    /// Directory holding `X.mdys`, or `ids.txt` with one compound id per line.
    #[arg(long)]
    input: PathBuf,
    /// Active bits per fingerprint when featurizing `ids.txt`.
    #[arg(long, default_value_t = 12)]
    n_active: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common, data } => cmd_generate(&common, &data),
        Command::Run(args) => cmd_run(&args),
        Command::Attack(args) => cmd_attack(&args),
        Command::Fuse { common, scores } => cmd_fuse(&common, &scores),
        Command::Predict(args) => cmd_predict(&args),
        Command::Report { common, runs } => report::cmd_report(&common.out, common.json, &runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsilo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn apply_common(cfg: &mut RunConfig, common: &Common, data: &DataArgs) -> Result<(), CliError> {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(p) = data.partners {
        cfg.partners = p;
    }
    if let Some(v) = &data.variant {
        cfg.variant = v.clone();
    }
    if let Some(n) = data.compounds {
        cfg.compounds = Some(n);
    }
    if let Some(c) = &data.corpus {
        cfg.corpus = c.parse().map_err(|message| CliError::Config { field: "corpus", message })?;
    }
    Ok(())
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<(), CliError> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        println!("{}", text());
    }
    Ok(())
}

fn partner_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("partner_{i}"))
}

#[derive(Serialize)]
struct GenerateSummary {
    partners: usize,
    variant: Variant,
    dirs: Vec<PathBuf>,
    rows: Vec<usize>,
}

fn cmd_generate(common: &Common, data: &DataArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    apply_common(&mut cfg, common, data)?;
    let r = cfg.resolve()?;
    let out = cfg.out_dir()?;
    let bundles = generate_bundles(&Seed::from_u64(cfg.seed), &r.gen)?;
    let mut dirs = Vec::new();
    for (i, b) in bundles.iter().enumerate() {
        let d = partner_dir(out, i);
        b.save(&d)?;
        dirs.push(d);
    }
    let summary = GenerateSummary {
        partners: bundles.len(),
        variant: r.variant,
        dirs,
        rows: bundles.iter().map(|b| b.n_rows()).collect(),
    };
    emit(common.json, &summary, || {
        format!("wrote {} {} bundles to {}", summary.partners, summary.variant, out.display())
    })
}

fn load_bundles(dir: &Path, partners: usize) -> Result<Vec<DatasetBundle>, CliError> {
    (0..partners)
        .map(|i| {
            let d = partner_dir(dir, i);
            DatasetBundle::load(&d).map_err(|e| CliError::Config {
                field: "data",
                message: format!("{}: {e}", d.display()),
            })
        })
        .collect()
}

/// Contents of `summary.json` in a run directory.
#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: String,
    pub phase: u8,
    pub partners: usize,
    pub rounds: usize,
    pub train_rows: Vec<usize>,
    pub metric_rows: usize,
    pub transcript_bytes: usize,
    /// Mean of the partners' training losses in the last round.
    pub final_train_loss: Option<f64>,
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(args.common.config.as_deref())?;
    apply_common(&mut cfg, &args.common, &args.data)?;
    if let Some(p) = args.phase {
        cfg.phase = p;
    }
    if let Some(d) = &args.data_dir {
        cfg.data = Some(d.clone());
    }
    cfg.verbose |= args.verbose;
    if let Some(m) = &args.mode {
        cfg.mode = m.clone();
    }
    let f = &mut cfg.federation;
    if let Some(v) = args.epochs {
        f.epochs = v;
    }
    if let Some(v) = args.batches_per_epoch {
        f.batches_per_epoch = v;
    }
    if let Some(v) = args.lr {
        f.lr = v;
    }
    if let Some(v) = args.k_fraction {
        f.k_fraction = v;
    }
    if let Some(w) = &args.weighting {
        f.weighting = w.parse().map_err(|message| CliError::Config { field: "weighting", message })?;
    }
    if let Some(h) = &args.hidden {
        f.hidden = h.clone();
    }
    if let Some(v) = args.eval_every {
        f.eval_every = v;
    }
    if let Some(v) = args.min_group_size {
        f.churn.min_group_size = v;
    }
    let r = cfg.resolve()?;
    let out = cfg.out_dir()?.to_path_buf();

    let master = Seed::from_u64(cfg.seed);
    let bundles = match &cfg.data {
        Some(d) => load_bundles(d, cfg.partners)?,
        None => generate_bundles(&master, &r.gen)?,
    };
    let tests = TestSchedule {
        every_rounds: cfg.federation.eval_every,
        partners: Vec::new(),
    };
    let output = run_phase(&cfg.federation, &master, &bundles, r.phase, &tests)?;

    if cfg.verbose {
        for r in &output.rounds {
            let losses: Vec<String> = r.train_loss.iter().map(|(id, l)| format!("p{id}={l:.4}")).collect();
            eprintln!("round {:>4}  coords {:>6}  {}", r.round, r.coords.len(), losses.join(" "));
        }
    }
    fs::create_dir_all(&out)?;
    write_metrics_csv(&output.metrics, fs::File::create(out.join("metrics.csv"))?)?;
    fs::write(out.join("transcript.bin"), &output.transcript)?;
    for (id, model) in &output.models {
        if *id == 0 {
            model.save_trunk(&out.join("trunk.mdym"))?;
        }
        model.save_head(&out.join(format!("head_p{id}.mdym")))?;
        if model.catalogue_head.is_some() {
            model.save_catalogue(&out.join(format!("catalogue_p{id}.mdym")))?;
        }
        // validation scores stay with the partner that computed them
        if let Some(fold) = r.phase.eval_fold() {
            let scores = evaluate(
                model,
                &bundles[*id as usize],
                fold,
                cfg.federation.eval_quorum,
                N_FOLDS,
                args.model_id,
            )?;
            write_scores(&out.join(format!("scores_p{id}.csv")), &scores)?;
        }
    }
    let summary = RunSummary {
        seed: cfg.seed,
        variant: r.variant.to_string(),
        phase: r.phase.number(),
        partners: bundles.len(),
        rounds: output.rounds.len(),
        train_rows: output.train_rows.values().copied().collect(),
        metric_rows: output.metrics.len(),
        transcript_bytes: output.transcript.len(),
        final_train_loss: output
            .rounds
            .last()
            .map(|r| r.train_loss.values().sum::<f64>() / r.train_loss.len().max(1) as f64),
    };
    fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    emit(args.common.json, &summary, || {
        format!(
            "phase {} ({}) with {} partners: {} rounds, {} metric rows, results in {}",
            summary.phase,
            summary.variant,
            summary.partners,
            summary.rounds,
            summary.metric_rows,
            out.display()
        )
    })
}

fn write_scores(path: &Path, scores: &[TaskScore]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in scores {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<TaskScore>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn attack_pool(args: &AttackArgs, master: &Seed) -> Result<DatasetBundle, CliError> {
    match &args.data {
        Some(d) => Ok(DatasetBundle::load(d)?),
        None => {
            let gen = fedsilo::datagen::GenConfig::bench(1, Variant::Cls);
            Ok(generate_bundles(master, &gen)?.remove(0))
        }
    }
}

fn cmd_attack(args: &AttackArgs) -> Result<(), CliError> {
    let (mia, masked, diff) = match args.kind.as_str() {
        "mia" => (true, false, false),
        "masked" => (false, true, false),
        "differentiation" => (false, false, true),
        "all" => (true, true, true),
        other => {
            return Err(CliError::Config {
                field: "kind",
                message: format!("unknown attack {other:?}"),
            })
        }
    };
    let master = Seed::from_u64(args.common.seed.unwrap_or(0));
    let pool = attack_pool(args, &master)?;
    let arch = Architecture {
        feature_dim: pool.feature_dim(),
        hidden: vec![args.width],
        n_head: pool.n_head_tasks(),
        n_catalogue: 0,
        nonlinearity: fedsilo::model::Nonlinearity::Relu,
    };
    let snapshot = ModelParams::init(
        &arch,
        &master.child(Purpose::TrunkInit, 0),
        &master.child(Purpose::HeadInit, 0),
        None,
    )?;
    let attack_seed = master.child(Purpose::Attack, 0);
    let mut results: Vec<AttackResult> = Vec::new();
    if mia {
        for &p in &args.aggregate {
            let mut c = MiaConfig::new(p);
            c.n_trials = args.trials;
            c.n_calibration = args.trials;
            results.push(mia_experiment(&c, &pool, &snapshot, &attack_seed)?);
        }
    }
    if masked {
        let mut c = MiaConfig::new(1);
        c.masked = true;
        c.n_trials = args.trials.max(1000);
        results.push(mia_experiment(&c, &pool, &snapshot, &attack_seed)?);
    }
    if diff {
        for &g in &args.groups {
            let mut c = DifferentiationConfig::new(g);
            c.n_trials = args.trials.min(100).max(2);
            results.push(differentiation_experiment(&c, &pool, &snapshot, &attack_seed)?);
        }
        let mut c = DifferentiationConfig::new(1);
        c.churn = false;
        results.push(differentiation_experiment(&c, &pool, &snapshot, &attack_seed)?);
    }
    if let Some(path) = &args.common.out {
        let mut w = csv::Writer::from_path(path)?;
        for r in &results {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    emit(args.common.json, &results, || {
        let mut s = format!("{:<16} {:>9} {:>9} {:>7}  target\n", "kind", "accuracy", "advantage", "trials");
        for r in &results {
            s += &format!(
                "{:<16} {:>9.3} {:>9.3} {:>7}  {}\n",
                serde_json::to_value(r.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                r.accuracy,
                r.advantage,
                r.n_trials,
                r.target
            );
        }
        s.trim_end().to_string()
    })
}

fn cmd_fuse(common: &Common, files: &[PathBuf]) -> Result<(), CliError> {
    let mut scores = Vec::new();
    for f in files {
        scores.extend(read_scores(f)?);
    }
    let map = fuse(&scores)?;
    if let Some(path) = &common.out {
        fs::write(path, serde_json::to_vec_pretty(&map)?)?;
    }
    let text = match &common.out {
        Some(p) => format!("selected models for {} tasks, map written to {}", map.selection.len(), p.display()),
        None => serde_json::to_string_pretty(&map)?,
    };
    emit(common.json, &map, || text)
}

fn load_input(dir: &Path, feature_dim: usize, n_active: usize) -> Result<CsrMatrix, CliError> {
    let x_path = dir.join("X.mdys");
    if x_path.exists() {
        return Ok(CsrMatrix::from_bytes(&fs::read(x_path)?)?);
    }
    let ids_path = dir.join("ids.txt");
    let text = fs::read_to_string(&ids_path).map_err(|e| CliError::Config {
        field: "input",
        message: format!("{} has neither X.mdys nor ids.txt: {e}", dir.display()),
    })?;
    let ids = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<u64>().map_err(|_| CliError::Config {
                field: "input",
                message: format!("bad compound id {l:?} in {}", ids_path.display()),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if n_active == 0 || n_active >= feature_dim {
        return Err(CliError::Config {
            field: "n_active",
            message: format!("must be between 1 and {}", feature_dim - 1),
        });
    }
    Ok(featurize_compounds(&ids, feature_dim, n_active))
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    if args.trunks.len() != args.heads.len() {
        return Err(CliError::Config {
            field: "head",
            message: format!("{} trunks but {} heads", args.trunks.len(), args.heads.len()),
        });
    }
    let mut models = BTreeMap::new();
    for (i, (t, h)) in args.trunks.iter().zip(&args.heads).enumerate() {
        let m = ModelParams::from_parts(load_trunk(t)?, load_head(h)?, None)?;
        models.insert(i as u32, m);
    }
    let first = &models[&0];
    let x = load_input(&args.input, first.feature_dim(), args.n_active)?;
    let tasks = args.tasks.as_deref();
    let preds: Predictions = match &args.fusion {
        Some(path) => {
            let map: FusionMap = serde_json::from_slice(&fs::read(path)?).map_err(|e| CliError::Config {
                field: "fusion",
                message: format!("{}: {e}", path.display()),
            })?;
            predict_fused(&models, &map, Some(0), &x, tasks)?
        }
        None => {
            if models.len() > 1 {
                return Err(CliError::Config {
                    field: "fusion",
                    message: "several models given without a fusion map".into(),
                });
            }
            predict(first, &x, tasks)?
        }
    };
    let out = args.common.out.as_deref().ok_or(CliError::Config {
        field: "out",
        message: "an output CSV path is required".into(),
    })?;
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["row".to_string()];
    header.extend(preds.columns.iter().map(|c| format!("task_{c}")));
    w.write_record(&header)?;
    for i in 0..preds.n_rows {
        let mut rec = vec![i.to_string()];
        rec.extend((0..preds.columns.len()).map(|k| preds.get(i, k).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Summary<'a> {
        rows: usize,
        columns: &'a [usize],
        out: &'a Path,
    }
    let s = Summary {
        rows: preds.n_rows,
        columns: &preds.columns,
        out,
    };
    emit(args.common.json, &s, || {
        format!("wrote {} rows × {} tasks to {}", s.rows, s.columns.len(), out.display())
    })
}
