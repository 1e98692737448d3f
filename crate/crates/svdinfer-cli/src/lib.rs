//! Command implementations behind the `svdinfer` binary.
//!
//! Each subcommand reads its inputs, runs the library pipeline and writes its
//! outputs into `--out`. Component indices `k` and `j` in every output table
//! are 1-based. Errors carry the process exit code: 2 for usage and
//! configuration problems, 3 for I/O, 4 for numerical failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use svdinfer::initfit::{self, PenaltyConfig};
use svdinfer::io::{fmt_f64, read_matrix_csv, read_table, write_table, FitFile};
use svdinfer::simlab::{self, McSummary, SimConfig};
use svdinfer::{inference, linmodel, rightdebias, Mode, RegressionData};

/// Failure of a subcommand, tagged with its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<svdinfer::Error> for CliError {
    fn from(e: svdinfer::Error) -> Self {
        use svdinfer::Error as E;
        let msg = e.to_string();
        match &e {
            E::Io(_) => CliError::Io(msg),
            E::Csv(inner) if inner.is_io_error() => CliError::Io(msg),
            _ if e.is_numerical() => CliError::Numerical(msg),
            _ => CliError::Usage(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "svdinfer", version, about = "Debiased inference on sparse SVD right factors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a Monte Carlo study and write coverage, length and T-statistic tables.
    Simulate(SimulateArgs),
    /// Fit the sparse SVD to X.csv and Y.csv and write fit.json.
    Fit(FitArgs),
    /// Debias a saved fit and write confidence intervals.
    Infer(InferArgs),
    /// Merge summary.csv files into report.csv and a Markdown table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Simulation config (JSON); defaults to setting 1.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `base_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Skip rank selection and use this rank.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Draw one design shared by all replications.
    #[arg(long)]
    pub fix_design: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Design matrix, headerless CSV.
    #[arg(long)]
    pub x: PathBuf,
    /// Response matrix, headerless CSV.
    #[arg(long)]
    pub y: PathBuf,
    /// Penalty config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Recorded in the manifest; the fit itself is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    /// fit.json written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Penalty config (JSON); supplies the nodewise and covariance settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = Mode::Weak)]
    pub mode: Mode,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// summary.csv files to merge.
    #[arg(required = true)]
    pub summaries: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything needed to rerun a command and get byte-identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config_path: Option<String>,
    pub inputs: Vec<String>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub alpha: Option<f64>,
    pub jobs: Option<usize>,
    pub rank: Option<usize>,
    pub fix_design: bool,
    /// The fully resolved configuration the command ran with.
    pub resolved: serde_json::Value,
}

impl RunManifest {
    fn new(subcommand: &str, resolved: serde_json::Value) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_path: None,
            inputs: Vec::new(),
            seed: None,
            mode: None,
            alpha: None,
            jobs: None,
            rank: None,
            fix_design: false,
            resolved,
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a).map(|s| {
            eprintln!(
                "{} replications, rank recovery {:.3}, {} failures, {:.1}s",
                s.replications,
                s.rank_recovery(),
                s.failures,
                s.runtime_secs
            );
        }),
        Command::Fit(a) => fit(&a).map(|f| eprintln!("rank {} (selected {})", f.rank, f.selected_rank)),
        Command::Infer(a) => infer(&a).map(|rows| eprintln!("{rows} intervals written")),
        Command::Report(a) => report(&a).map(|rows| eprintln!("{rows} components merged")),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn load_penalty(path: Option<&Path>) -> CliResult<PenaltyConfig> {
    let cfg: PenaltyConfig = match path {
        Some(p) => read_json(p)?,
        None => PenaltyConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(x: &Path, y: &Path) -> CliResult<RegressionData> {
    let x = read_matrix_csv(x)?;
    let y = read_matrix_csv(y)?;
    Ok(RegressionData::new(x, y)?)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Resolves the simulation config with the command-line overrides applied.
pub fn resolve_sim_config(args: &SimulateArgs) -> CliResult<SimConfig> {
    let mut cfg: SimConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    if args.rank.is_some() {
        cfg.rank_override = args.rank;
    }
    cfg.fix_design |= args.fix_design;
    if args.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Header of summary.csv and report.csv.
pub const SUMMARY_HEADER: [&str; 8] = ["k", "j", "truth_label", "count", "covered", "cp", "mean_len", "len_sum"];

/// Evaluation grid of kde.csv.
pub fn kde_grid() -> Vec<f64> {
    (0..=160).map(|i| -4.0 + 0.05 * i as f64).collect()
}

/// Components whose T-statistic densities go into kde.csv: for each layer,
/// its first nonzero component and the last component.
pub fn plotted_components(summary: &McSummary) -> Vec<(usize, usize)> {
    let r = summary.components.len() / summary.q;
    let mut out = Vec::new();
    for k in 0..r {
        if let Some(first) = (0..summary.q).find(|&j| summary.component(k, j).nonzero) {
            out.push((k, first));
        }
        out.push((k, summary.q - 1));
    }
    out.dedup();
    out
}

fn summary_rows(summary: &McSummary) -> Vec<Vec<String>> {
    summary
        .components
        .iter()
        .map(|c| {
            vec![
                (c.k + 1).to_string(),
                (c.j + 1).to_string(),
                if c.nonzero { "nonzero" } else { "zero" }.to_string(),
                c.count.to_string(),
                c.covered.to_string(),
                fmt_f64(c.cp()),
                fmt_f64(c.mean_len()),
                fmt_f64(c.len_sum),
            ]
        })
        .collect()
}

/// `simulate`: writes summary.csv, tstats.csv, kde.csv and manifest.json.
pub fn simulate(args: &SimulateArgs) -> CliResult<McSummary> {
    let cfg = resolve_sim_config(args)?;
    prepare_out(&args.out)?;
    let summary = simlab::monte_carlo(&cfg, args.jobs)?;

    write_table(&args.out.join("summary.csv"), &SUMMARY_HEADER, &summary_rows(&summary))?;

    let mut trows = Vec::new();
    for c in &summary.components {
        for t in &c.t {
            trows.push(vec![(c.k + 1).to_string(), (c.j + 1).to_string(), fmt_f64(*t)]);
        }
    }
    write_table(&args.out.join("tstats.csv"), &["k", "j", "t"], &trows)?;

    let grid = kde_grid();
    let mut krows = Vec::new();
    for (k, j) in plotted_components(&summary) {
        let c = summary.component(k, j);
        if c.t.len() < 2 {
            continue;
        }
        let dens = simlab::kde(&c.t, &grid)?;
        for (x, f) in grid.iter().zip(dens) {
            krows.push(vec![(k + 1).to_string(), (j + 1).to_string(), fmt_f64(*x), fmt_f64(f)]);
        }
    }
    write_table(&args.out.join("kde.csv"), &["k", "j", "x", "density"], &krows)?;

    let mut manifest = RunManifest::new(
        "simulate",
        serde_json::to_value(&cfg).map_err(|e| CliError::Io(e.to_string()))?,
    );
    manifest.config_path = args.config.as_deref().map(display);
    manifest.seed = Some(cfg.base_seed);
    manifest.mode = Some(cfg.mode);
    manifest.alpha = Some(cfg.alpha);
    manifest.jobs = Some(args.jobs);
    manifest.rank = cfg.rank_override;
    manifest.fix_design = cfg.fix_design;
    write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(summary)
}

/// Fits the sparse SVD with the selector's rank unless `rank` is given.
pub fn fit_data(data: &RegressionData, penalty: &PenaltyConfig, rank: Option<usize>) -> CliResult<FitFile> {
    let sigma = linmodel::gram(data);
    let r_max = data.p().min(data.q());
    let selected = initfit::select_rank(data, &sigma, r_max, penalty.rank_c);
    let r = rank.unwrap_or(selected);
    if r == 0 || r > r_max {
        return Err(CliError::Usage(format!("rank {r} outside [1, {r_max}]")));
    }
    let out = initfit::sofar_fit(data, &sigma, r, penalty)?;
    if !out.converged {
        eprintln!("warning: sparse SVD fit hit max_iter; returning the last iterate");
    }
    Ok(FitFile {
        rank: r,
        selected_rank: selected,
        rank_overridden: rank.is_some(),
        d: out.fit.d().iter().copied().collect(),
        left: FitFile::columns(out.fit.left()),
        right: FitFile::columns(out.fit.right()),
        lambda: out.lambda,
        converged: out.converged,
        iterations: out.iterations,
    })
}

/// `fit`: writes fit.json and manifest.json.
pub fn fit(args: &FitArgs) -> CliResult<FitFile> {
    let penalty = load_penalty(args.config.as_deref())?;
    let data = load_data(&args.x, &args.y)?;
    for j in data.column_norm_warnings() {
        eprintln!("warning: column {} of X has norm far from sqrt(n)", j + 1);
    }
    prepare_out(&args.out)?;
    let file = fit_data(&data, &penalty, args.rank)?;
    write_json(&args.out.join("fit.json"), &file)?;
    let mut manifest = RunManifest::new(
        "fit",
        serde_json::to_value(&penalty).map_err(|e| CliError::Io(e.to_string()))?,
    );
    manifest.config_path = args.config.as_deref().map(display);
    manifest.inputs = vec![display(&args.x), display(&args.y)];
    manifest.seed = args.seed;
    manifest.rank = args.rank;
    write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(file)
}

/// One row of intervals.csv. `interval` is `None` when the variance estimate
/// is not positive.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub mode: Mode,
    pub k: usize,
    pub j: usize,
    pub estimate: f64,
    pub interval: Option<inference::IntervalReport>,
}

/// Debiases every layer of `fit` and builds the componentwise intervals.
pub fn infer_data(
    data: &RegressionData,
    fit: &svdinfer::SvdFit,
    penalty: &PenaltyConfig,
    mode: Mode,
    alpha: f64,
) -> CliResult<Vec<IntervalRow>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Usage(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if fit.left().nrows() != data.p() || fit.right().nrows() != data.q() {
        return Err(CliError::Usage(format!(
            "fit has p = {}, q = {} but the data have p = {}, q = {}",
            fit.left().nrows(),
            fit.right().nrows(),
            data.p(),
            data.q()
        )));
    }
    let sigma = linmodel::gram(data);
    let factors = linmodel::scaled_factors(data, &sigma, fit)?;
    let sigma_e = initfit::residual_noise_cov(data, fit, penalty.tau_cov).sigma_e;
    let results = match mode {
        Mode::Strong => rightdebias::infer_strong(data, fit, &factors, &sigma, &sigma_e)?,
        Mode::Weak => {
            let theta = initfit::nodewise_precision(data, &sigma, penalty)?.theta;
            rightdebias::infer_weak(data, fit, &factors, &sigma, &theta, &sigma_e)?
        }
    };
    let mut rows = Vec::new();
    for res in &results {
        for j in 0..data.q() {
            let est = res.v_hat[j];
            let interval = inference::confidence_interval(est, res.variance[j], data.n(), alpha).ok();
            rows.push(IntervalRow {
                mode,
                k: res.k,
                j,
                estimate: est,
                interval,
            });
        }
    }
    Ok(rows)
}

/// `infer`: writes intervals.csv and manifest.json; returns the row count.
pub fn infer(args: &InferArgs) -> CliResult<usize> {
    if !args.fit.is_file() {
        return Err(CliError::Usage(format!("fit file {} not found", args.fit.display())));
    }
    let penalty = load_penalty(args.config.as_deref())?;
    let file: FitFile = read_json(&args.fit)?;
    let fit = file.to_fit()?;
    let data = load_data(&args.x, &args.y)?;
    prepare_out(&args.out)?;
    let rows = infer_data(&data, &fit, &penalty, args.mode, args.alpha)?;
    let mut table = Vec::with_capacity(rows.len());
    for row in &rows {
        let (se, lo, hi, sig) = match &row.interval {
            Some(ci) => (fmt_f64(ci.std_err), fmt_f64(ci.lo), fmt_f64(ci.hi), ci.significant.to_string()),
            None => {
                eprintln!(
                    "warning: layer {}, component {}: variance not positive, interval suppressed",
                    row.k + 1,
                    row.j + 1
                );
                (String::new(), String::new(), String::new(), String::new())
            }
        };
        table.push(vec![
            row.mode.to_string(),
            (row.k + 1).to_string(),
            (row.j + 1).to_string(),
            fmt_f64(row.estimate),
            se,
            lo,
            hi,
            sig,
        ]);
    }
    write_table(
        &args.out.join("intervals.csv"),
        &["mode", "k", "j", "estimate", "std_err", "ci_lo", "ci_hi", "significant"],
        &table,
    )?;
    let mut manifest = RunManifest::new(
        "infer",
        serde_json::to_value(&penalty).map_err(|e| CliError::Io(e.to_string()))?,
    );
    manifest.config_path = args.config.as_deref().map(display);
    manifest.inputs = vec![display(&args.x), display(&args.y), display(&args.fit)];
    manifest.seed = args.seed;
    manifest.mode = Some(args.mode);
    manifest.alpha = Some(args.alpha);
    write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(table.len())
}

/// Pooled counts for one component across summary files.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub nonzero: bool,
    pub count: usize,
    pub covered: usize,
    pub len_sum: f64,
}

impl Pooled {
    pub fn cp(&self) -> f64 {
        self.covered as f64 / self.count as f64
    }

    pub fn mean_len(&self) -> f64 {
        self.len_sum / self.count as f64
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, row: &[String], idx: usize) -> CliResult<T> {
    row.get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::Usage(format!("{}: malformed row {row:?}", path.display())))
}

/// Sums counts and lengths per `(k, j)` (1-based) over summary files.
pub fn pool_summaries(paths: &[PathBuf]) -> CliResult<BTreeMap<(usize, usize), Pooled>> {
    let mut pooled: BTreeMap<(usize, usize), Pooled> = BTreeMap::new();
    for path in paths {
        let (header, rows) = read_table(path).map_err(|e| match e {
            svdinfer::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
            other => CliError::from(other),
        })?;
        if header != SUMMARY_HEADER {
            return Err(CliError::Usage(format!("{}: not a summary table", path.display())));
        }
        for row in rows {
            let key = (parse_field(path, &row, 0)?, parse_field(path, &row, 1)?);
            let nonzero = row[2] == "nonzero";
            let count: usize = parse_field(path, &row, 3)?;
            let covered: usize = parse_field(path, &row, 4)?;
            let len_sum: f64 = parse_field(path, &row, 7)?;
            let slot = pooled.entry(key).or_insert(Pooled {
                nonzero,
                count: 0,
                covered: 0,
                len_sum: 0.0,
            });
            if slot.nonzero != nonzero {
                return Err(CliError::Usage(format!(
                    "{}: component {key:?} changes its truth label",
                    path.display()
                )));
            }
            slot.count += count;
            slot.covered += covered;
            slot.len_sum += len_sum;
        }
    }
    Ok(pooled)
}

/// Markdown table with one column group per layer: the nonzero components
/// followed by the last three components.
pub fn markdown_table(pooled: &BTreeMap<(usize, usize), Pooled>) -> String {
    let layers: Vec<usize> = {
        let mut ks: Vec<usize> = pooled.keys().map(|&(k, _)| k).collect();
        ks.dedup();
        ks
    };
    let columns: Vec<Vec<(usize, &Pooled)>> = layers
        .iter()
        .map(|&k| {
            let entries: Vec<(usize, &Pooled)> =
                pooled.range((k, 0)..(k + 1, 0)).map(|(&(_, j), v)| (j, v)).collect();
            let mut shown: Vec<(usize, &Pooled)> = entries.iter().filter(|(_, v)| v.nonzero).copied().collect();
            for &(j, v) in entries.iter().rev().take(3).rev() {
                if !shown.iter().any(|&(s, _)| s == j) {
                    shown.push((j, v));
                }
            }
            shown
        })
        .collect();
    let mut out = String::new();
    let mut header = String::from("|");
    let mut rule = String::from("|");
    for _ in &layers {
        header.push_str(" component | CP | Len |");
        rule.push_str("---|---|---|");
    }
    out.push_str(&header);
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    let height = columns.iter().map(Vec::len).max().unwrap_or(0);
    for row in 0..height {
        out.push('|');
        for (col, &k) in columns.iter().zip(&layers) {
            match col.get(row) {
                Some(&(j, v)) if v.count > 0 => {
                    out.push_str(&format!(" v[{k},{j}] | {:.3} | {:.3} |", v.cp(), v.mean_len()))
                }
                Some(&(j, _)) => out.push_str(&format!(" v[{k},{j}] | - | - |")),
                None => out.push_str(" | | |"),
            }
        }
        out.push('\n');
    }
    out
}

/// `report`: writes report.csv and report.md; returns the component count.
pub fn report(args: &ReportArgs) -> CliResult<usize> {
    let pooled = pool_summaries(&args.summaries)?;
    prepare_out(&args.out)?;
    let rows: Vec<Vec<String>> = pooled
        .iter()
        .map(|(&(k, j), v)| {
            vec![
                k.to_string(),
                j.to_string(),
                if v.nonzero { "nonzero" } else { "zero" }.to_string(),
                v.count.to_string(),
                v.covered.to_string(),
                fmt_f64(v.cp()),
                fmt_f64(v.mean_len()),
                fmt_f64(v.len_sum),
            ]
        })
        .collect();
    write_table(&args.out.join("report.csv"), &SUMMARY_HEADER, &rows)?;
    let sources: Vec<String> = args.summaries.iter().map(|p| format!("- `{}`", p.display())).collect();
    let md = format!(
        "# Coverage report\n\nPooled from:\n\n{}\n\n{}",
        sources.join("\n"),
        markdown_table(&pooled)
    );
    fs::write(args.out.join("report.md"), md)?;
    Ok(rows.len())
}
