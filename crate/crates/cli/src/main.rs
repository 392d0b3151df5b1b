//! `clknn`: synthetic data generation, adapter training, PCA fitting,
//! transformation, evaluation and M/N ablation from the command line.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clknn::adapter::train_adapter;
use clknn::synth::{
    generate_synth, run_ablation, train_toy_predictor, write_ablation_csv, write_pca_2d_csv,
    write_summary_csv, PreparedEval, RetrievalSpace,
};
use clknn::{AdapterParams, Datastore, Error, Metric, PcaModel};

use crate::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(
    name = "clknn",
    version,
    about = "Contrastive retrieval representations for kNN token prediction"
)]
struct Cli {
    /// Flat JSON pipeline config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CLKNN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train, heldout and general-domain datastores.
    GenSynth {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also dump the leading two PCA coordinates of the train keys.
        #[arg(long)]
        pca_2d: Option<PathBuf>,
    },
    /// Train the retrieval adapter on a datastore.
    TrainAdapter {
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fit PCA on the keys of a datastore.
    FitPca {
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Map datastore keys through the adapter and optionally PCA + normalization.
    Transform {
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        pca: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the leading two PCA coordinates of the output keys.
        #[arg(long)]
        pca_2d: Option<PathBuf>,
    },
    /// Score heldout queries with p_c, p_r and p_knn and write CSV reports.
    Evaluate(EvaluateArgs),
    /// Train one adapter per (M, N) pair and write the accuracy grid.
    Ablate {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Pairs such as `2x32,1x1`; overrides the config grid.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Raw datastore searched for neighbors.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Datastore the base predictor is fit on (default: the store).
    #[arg(long)]
    general: Option<PathBuf>,
    /// Without an adapter the run is plain kNN-MT over raw keys.
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "temperature")]
    t: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    adaptive_lambda: Option<bool>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Dimension(String),
    Io(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dimension(_) => 3,
            CliError::Io(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (cat, msg) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Dimension(m) => ("dimension", m),
            CliError::Io(m) => ("io", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        write!(f, "{cat}: {}", msg.replace('\n', " "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidConfig(_) => CliError::Config(msg),
            Error::DimensionMismatch { .. } => CliError::Dimension(msg),
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. } => CliError::Io(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn with_path<T>(path: &Path, r: clknn::Result<T>) -> CliResult<T> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn required(arg: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    arg.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("missing --{name}")))
}

fn load_store(path: &Path) -> CliResult<Datastore> {
    with_path(path, Datastore::load(path))
}

fn load_adapter(path: &Path) -> CliResult<AdapterParams> {
    with_path(path, AdapterParams::load(path))
}

fn load_pca(path: &Path) -> CliResult<PcaModel> {
    with_path(path, PcaModel::load(path))
}

/// Outputs are rendered in memory first and only written once the whole
/// command has succeeded; each file goes through a rename so a crash never
/// leaves a half-written artifact behind.
#[derive(Default)]
struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.0.push((path, bytes));
    }

    fn commit(self) -> CliResult<()> {
        let io = |p: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", p.display()));
        for (path, bytes) in self.0 {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            }
            let mut tmp = path.clone().into_os_string();
            tmp.push(".tmp");
            let tmp = PathBuf::from(tmp);
            fs::write(&tmp, &bytes).map_err(|e| io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

fn csv<F>(f: F) -> CliResult<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(buf)
}

fn parse_grid(spec: &str) -> CliResult<Vec<(usize, usize)>> {
    spec.split(',')
        .map(|pair| {
            let (m, n) = pair
                .trim()
                .split_once('x')
                .ok_or_else(|| CliError::Config(format!("bad grid pair {pair:?}")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| CliError::Config(format!("bad grid pair {pair:?}")))
            };
            Ok((parse(m)?, parse(n)?))
        })
        .collect()
}

fn check_same_dim(expected: &Datastore, found: &Datastore) -> CliResult<()> {
    if expected.dim() != found.dim() {
        return Err(Error::DimensionMismatch {
            expected: expected.dim(),
            found: found.dim(),
        }
        .into());
    }
    if expected.vocab_size() != found.vocab_size() {
        return Err(CliError::Config(format!(
            "vocabulary sizes differ: {} vs {}",
            expected.vocab_size(),
            found.vocab_size()
        )));
    }
    Ok(())
}

fn gen_synth(
    cfg: &PipelineConfig,
    out_dir: Option<PathBuf>,
    pca_2d: Option<PathBuf>,
) -> CliResult<()> {
    let dir = required(out_dir, &cfg.out_dir, "out-dir")?;
    let data = generate_synth(&cfg.synth()?)?;
    let mut out = Outputs::default();
    out.add(dir.join("train.clkn"), data.train.to_bytes()?);
    out.add(dir.join("heldout.clkn"), data.heldout.to_bytes()?);
    out.add(dir.join("general.clkn"), data.general.to_bytes()?);
    if let Some(p) = pca_2d {
        let mut buf = Vec::new();
        write_pca_2d_csv(&data.train, &mut buf)?;
        out.add(p, buf);
    }
    out.commit()
}

fn train(
    cfg: &PipelineConfig,
    datastore: Option<PathBuf>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
) -> CliResult<()> {
    let tcfg = cfg.train()?;
    let ds_path = required(datastore, &cfg.train_path, "datastore")?;
    let out_path = required(out, &cfg.adapter_path, "out")?;
    let ds = load_store(&ds_path)?;
    let result = train_adapter(&ds, &tcfg)?;
    let mut outputs = Outputs::default();
    outputs.add(out_path, result.params.to_bytes()?);
    if let Some(log) = log {
        outputs.add(log, csv(|b| result.write_log_csv(b))?);
    }
    if result.skipped_anchors > 0 {
        eprintln!(
            "warning: {} degenerate anchors skipped",
            result.skipped_anchors
        );
    }
    outputs.commit()
}

fn fit_pca(
    cfg: &PipelineConfig,
    datastore: Option<PathBuf>,
    p: Option<usize>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let p = p.unwrap_or(cfg.pca_dim);
    let ds_path = required(datastore, &None, "datastore")?;
    let out_path = required(out, &cfg.pca_path, "out")?;
    let ds = load_store(&ds_path)?;
    if p == 0 || p > ds.dim() {
        return Err(CliError::Dimension(format!(
            "PCA output dim {p} must be in 1..={}",
            ds.dim()
        )));
    }
    let pca = PcaModel::fit_datastore(&ds, p)?;
    let mut outputs = Outputs::default();
    outputs.add(out_path, pca.to_bytes()?);
    outputs.commit()
}

fn transform(
    cfg: &PipelineConfig,
    datastore: Option<PathBuf>,
    adapter: Option<PathBuf>,
    pca: Option<PathBuf>,
    out: PathBuf,
    pca_2d: Option<PathBuf>,
) -> CliResult<()> {
    let ds = load_store(&required(datastore, &cfg.train_path, "datastore")?)?;
    let adapter = adapter
        .or_else(|| cfg.adapter_path.clone())
        .map(|p| load_adapter(&p))
        .transpose()?;
    let pca = pca.map(|p| load_pca(&p)).transpose()?;
    if adapter.is_none() && pca.is_none() {
        return Err(CliError::Config(
            "transform needs --adapter and/or --pca".into(),
        ));
    }
    let space = RetrievalSpace {
        adapter: adapter.as_ref(),
        pca: pca.as_ref(),
    };
    space.validate(ds.dim())?;
    let width = pca
        .as_ref()
        .map(|p| p.output_dim())
        .or(adapter.as_ref().map(|a| a.output_dim()))
        .unwrap_or(ds.dim());
    let mapped = ds.map_keys(width, |h| space.apply(h))?;
    let mut outputs = Outputs::default();
    outputs.add(out, mapped.to_bytes()?);
    if let Some(p) = pca_2d {
        let mut buf = Vec::new();
        write_pca_2d_csv(&mapped, &mut buf)?;
        outputs.add(p, buf);
    }
    outputs.commit()
}

fn evaluate(cfg: &PipelineConfig, a: EvaluateArgs) -> CliResult<()> {
    let mut cfg = cfg.clone();
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(t) = a.t {
        cfg.t = t;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(m) = a.metric {
        cfg.metric = m;
    }
    if let Some(f) = a.adaptive_lambda {
        cfg.use_adaptive_lambda = f;
    }
    let rcfg = cfg.retrieval()?;
    cfg.validate_eval()?;
    let out_dir = required(a.out_dir, &cfg.out_dir, "out-dir")?;

    let heldout = load_store(&required(a.heldout, &cfg.heldout_path, "heldout")?)?;
    let store = load_store(&required(a.store, &cfg.train_path, "store")?)?;
    let general = a
        .general
        .or_else(|| cfg.general_path.clone())
        .map(|p| load_store(&p))
        .transpose()?;
    let adapter = a
        .adapter
        .or_else(|| cfg.adapter_path.clone())
        .map(|p| load_adapter(&p))
        .transpose()?;
    let pca = a
        .pca
        .or_else(|| cfg.pca_path.clone())
        .map(|p| load_pca(&p))
        .transpose()?;

    check_same_dim(&store, &heldout)?;
    if let Some(g) = &general {
        check_same_dim(&store, g)?;
    }
    let space = RetrievalSpace {
        adapter: adapter.as_ref(),
        pca: pca.as_ref(),
    };
    space.validate(store.dim())?;

    let (predictor, _) = train_toy_predictor(
        general.as_ref().unwrap_or(&store),
        cfg.predictor_epochs,
        cfg.predictor_lr,
        cfg.seed,
    )?;
    let k_max = cfg
        .ks
        .iter()
        .copied()
        .chain([rcfg.k])
        .max()
        .unwrap_or(rcfg.k);
    let prepared = PreparedEval::new(&heldout, &store, &predictor, space, rcfg.metric, k_max)?;
    let report = prepared.report(&rcfg, &cfg.ks)?;

    let mut outputs = Outputs::default();
    outputs.add(
        out_dir.join(format!("curve_{}.csv", report.method)),
        csv(|b| report.curve.write_csv(b))?,
    );
    outputs.add(
        out_dir.join("summary.csv"),
        csv(|b| write_summary_csv(std::slice::from_ref(&report), b))?,
    );
    outputs.commit()?;
    println!("{}", report.summary_row());
    Ok(())
}

fn ablate(
    cfg: &PipelineConfig,
    train: Option<PathBuf>,
    heldout: Option<PathBuf>,
    grid: Option<String>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let base = cfg.train()?;
    cfg.validate_eval()?;
    let grid = match grid {
        Some(g) => parse_grid(&g)?,
        None => cfg.grid.clone(),
    };
    if grid.is_empty() || grid.iter().any(|&(m, n)| m == 0 || n == 0) {
        return Err(CliError::Config("grid needs pairs with M, N >= 1".into()));
    }
    let out_path = match out {
        Some(p) => p,
        None => required(None, &cfg.out_dir, "out")?.join("ablation.csv"),
    };
    let train = load_store(&required(train, &cfg.train_path, "train")?)?;
    let heldout = load_store(&required(heldout, &cfg.heldout_path, "heldout")?)?;
    check_same_dim(&train, &heldout)?;
    if cfg.pca_dim > base.output_dim {
        return Err(CliError::Dimension(format!(
            "pca_dim {} exceeds d_o {}",
            cfg.pca_dim, base.output_dim
        )));
    }
    let rows = run_ablation(&train, &heldout, &base, &grid, cfg.pca_dim, &cfg.ks)?;
    let mut outputs = Outputs::default();
    outputs.add(out_path, csv(|b| write_ablation_csv(&rows, b))?);
    outputs.commit()
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| match e {
            Error::Io(io) => CliError::Io(format!("{}: {io}", p.display())),
            other => other.into(),
        })?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    // Parsed once up front so a bad metric string fails before any work.
    let _: Metric = cfg.metric()?;
    match cli.command {
        Command::GenSynth { out_dir, pca_2d } => gen_synth(&cfg, out_dir, pca_2d),
        Command::TrainAdapter {
            datastore,
            out,
            log,
        } => train(&cfg, datastore, out, log),
        Command::FitPca { datastore, p, out } => fit_pca(&cfg, datastore, p, out),
        Command::Transform {
            datastore,
            adapter,
            pca,
            out,
            pca_2d,
        } => transform(&cfg, datastore, adapter, pca, out, pca_2d),
        Command::Evaluate(args) => evaluate(&cfg, args),
        Command::Ablate {
            train,
            heldout,
            grid,
            out,
        } => ablate(&cfg, train, heldout, grid, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
