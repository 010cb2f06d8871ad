//! Command-line front end.
//!
//! Every subcommand writes a `manifest.json` next to its outputs. The
//! manifest's `config` object can be passed back through `--config` to
//! replay the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    assemble_evaluation_periods, AssemblyConfig, ChangeBaseline, Cohort, RawLogs, ASSESSMENTS_FILE,
    FEATURE_NAMES, ITS_FILE, ROSTER_FILE, SESSIONS_FILE,
};
use crate::error::Error;
use crate::pipeline::{
    run_baselines, run_change_pipeline, run_sweep, AgreementSet, FeatureSet, PipelineReport,
    SweepConfig, FULL_SWEEP_SEEDS,
};
use crate::synth::{generate_cohort, CohortSpec, OutcomeMode, COHORT_FILE};
use crate::tree::{export_tree, ExportFormat, TreeNode};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table3.csv";
pub const TREE_DOT_FILE: &str = "final_tree.dot";
pub const TREE_JSON_FILE: &str = "final_tree.json";

/// Exit status for bad arguments or configuration.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while loading data or running an analysis.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParam(m) | Error::InfeasibleSpec(m) => CliError::Config(m),
            e => CliError::Runtime(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "forestlens", version, about = "Extract interpretable decision trees from random forests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort with a planted rule.
    Synth(SynthArgs),
    /// Threshold/seed sweep with tree extraction.
    Run(AnalysisArgs),
    /// Sweep all three feature sets and tabulate the baselines.
    Baselines(AnalysisArgs),
    /// Sweep on round-to-round score changes.
    Change(ChangeArgs),
    /// Re-render a saved tree.
    ExportTree(ExportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tutors: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long, value_enum)]
    pub outcome: Option<OutcomeArg>,
    /// Cohort spec as JSON, or a manifest written by `synth`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OutcomeArg {
    Score,
    Real,
}

#[derive(Args, Debug)]
pub struct AnalysisArgs {
    /// Directory with raw logs (or only `cohort.csv`), or a cohort CSV file.
    #[arg(long, conflicts_with = "synth_seed")]
    pub cohort: Option<PathBuf>,
    /// Generate the default synthetic cohort in memory with this seed.
    #[arg(long)]
    pub synth_seed: Option<u64>,
    /// `start:end:step` (inclusive) or a comma-separated list.
    #[arg(long, value_parser = parse_thresholds)]
    pub thresholds: Option<Thresholds>,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Use the full 10,000-seed sweep.
    #[arg(long, conflicts_with = "seeds")]
    pub full_sweep: bool,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long, value_parser = parse_feature_set)]
    pub features: Option<FeatureSet>,
    #[arg(long, value_enum)]
    pub agreement: Option<AgreementArg>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the plain-DT, RFC and RFR baselines.
    #[arg(long)]
    pub no_baselines: bool,
    #[arg(long)]
    pub record_candidates: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Run config as JSON, or a manifest from an earlier run. Flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ChangeArgs {
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// What the first round of each student becomes.
    #[arg(long, value_enum)]
    pub first_round: Option<FirstRoundArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AgreementArg {
    Training,
    Validation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FirstRoundArg {
    Zero,
    Drop,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// `final_tree.json` or a `report.json`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "dot")]
    pub format: FormatArg,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Dot,
    Json,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thresholds(pub Vec<f64>);

pub fn parse_thresholds(s: &str) -> std::result::Result<Thresholds, String> {
    let num = |t: &str| -> std::result::Result<f64, String> {
        let v: f64 = t.trim().parse().map_err(|_| format!("`{t}` is not a number"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("`{t}` is not finite"))
        }
    };
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err("range form is start:end:step".into());
        }
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step <= 0.0 || b < a {
            return Err("range needs step > 0 and end >= start".into());
        }
        let count = ((b - a) / step + 1e-9).floor() as usize + 1;
        // rounded to 1e-9 so 0.1 steps print as typed
        Ok(Thresholds(
            (0..count)
                .map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9)
                .collect(),
        ))
    } else {
        let v = s.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?;
        if v.is_empty() {
            return Err("no thresholds given".into());
        }
        Ok(Thresholds(v))
    }
}

fn parse_feature_set(s: &str) -> std::result::Result<FeatureSet, String> {
    s.parse::<FeatureSet>().map_err(|e| e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Run,
    Baselines,
    Change,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// Directory or cohort CSV on disk.
    Cohort(PathBuf),
    /// Cohort generated in memory.
    Synth(CohortSpec),
}

/// Everything that determines an analysis' outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub analysis: Analysis,
    pub input: InputSource,
    #[serde(default)]
    pub assembly: AssemblyConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub change_baseline: ChangeBaseline,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub tool: String,
    pub version: String,
    pub config: C,
    /// Forest seed of each sweep seed index.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forest_seeds: Vec<u64>,
    /// SHA-256 of each input file read.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file written.
    pub outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into one directory and remembers their digests.
struct OutputDir {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
}

impl OutputDir {
    fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            digests: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Runtime(Error::io(&path, e)))?;
        self.digests.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    /// Digests of files already written by someone else.
    fn record(&mut self, name: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| CliError::Runtime(Error::io(&path, e)))?;
        self.digests.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish<C: Serialize>(mut self, config: C, forest_seeds: Vec<u64>, inputs: BTreeMap<String, String>) -> CliResult<()> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            forest_seeds,
            inputs,
            outputs: std::mem::take(&mut self.digests),
        };
        let text = to_json(&manifest)?;
        self.write(MANIFEST_FILE, &text)
    }
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))?;
    s.push('\n');
    Ok(s)
}

/// Reads `path` as `T`, or as the `config` member of a manifest.
fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: invalid JSON: {e}", path.display())))?;
    let value = match value {
        serde_json::Value::Object(mut map) if map.contains_key("outputs") && map.contains_key("config") => {
            map.remove("config").expect("checked")
        }
        v => v,
    };
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_CONFIG,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(args) => synth(args),
        Command::Run(args) => analysis(Analysis::Run, args, None),
        Command::Baselines(args) => analysis(Analysis::Baselines, args, None),
        Command::Change(args) => {
            let first = args.first_round.map(|f| match f {
                FirstRoundArg::Zero => ChangeBaseline::Zero,
                FirstRoundArg::Drop => ChangeBaseline::Drop,
            });
            analysis(Analysis::Change, args.analysis, first)
        }
        Command::ExportTree(args) => export(args),
    }
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let mut spec: CohortSpec = match &args.config {
        Some(p) => read_config(p)?,
        None => CohortSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.tutors {
        spec.n_tutors = n;
    }
    if let Some(sd) = args.noise_sd {
        spec.noise_sd = sd;
    }
    if let Some(o) = args.outcome {
        spec.outcome_mode = match o {
            OutcomeArg::Score => OutcomeMode::Score,
            OutcomeArg::Real => OutcomeMode::Real,
        };
    }
    let generated = generate_cohort(&spec)?;
    let mut out = OutputDir::create(&args.out)?;
    generated.write_dir(&args.out)?;
    for name in [SESSIONS_FILE, ITS_FILE, ASSESSMENTS_FILE, ROSTER_FILE, COHORT_FILE, crate::synth::PLANTED_RULE_FILE] {
        out.record(name)?;
    }
    log::info!(
        "wrote {} students / {} evaluation periods to {}",
        generated.cohort.students().len(),
        generated.cohort.len(),
        args.out.display()
    );
    out.finish(&spec, Vec::new(), BTreeMap::new())
}

/// Builds the run config from `--config` (if any) overridden by flags.
pub fn resolve_run_config(
    analysis: Analysis,
    args: &AnalysisArgs,
    first_round: Option<ChangeBaseline>,
) -> CliResult<RunConfig> {
    let from_file: Option<RunConfig> = args.config.as_deref().map(read_config).transpose()?;
    let default_sweep = || match analysis {
        Analysis::Change => SweepConfig::for_changes(),
        _ => SweepConfig::default(),
    };
    let input = match (&args.cohort, args.synth_seed, &from_file) {
        (Some(p), _, _) => InputSource::Cohort(p.clone()),
        (None, Some(seed), _) => InputSource::Synth(CohortSpec {
            seed,
            ..CohortSpec::default()
        }),
        (None, None, Some(c)) => c.input.clone(),
        (None, None, None) => {
            return Err(CliError::Config(
                "no input: pass --cohort DIR, --synth-seed S or --config".into(),
            ))
        }
    };
    let mut cfg = match from_file {
        Some(c) => RunConfig {
            analysis,
            input,
            ..c
        },
        None => RunConfig {
            analysis,
            input,
            assembly: AssemblyConfig::default(),
            sweep: default_sweep(),
            change_baseline: ChangeBaseline::default(),
        },
    };
    let sweep = &mut cfg.sweep;
    if let Some(t) = &args.thresholds {
        sweep.thresholds = t.0.clone();
    }
    if let Some(n) = args.seeds {
        sweep.n_seeds = n;
    }
    if args.full_sweep {
        sweep.n_seeds = FULL_SWEEP_SEEDS;
    }
    if let Some(n) = args.trees {
        sweep.forest_params.n_trees = n;
    }
    if let Some(d) = args.max_depth {
        sweep.forest_params.tree_params.max_depth = d;
    }
    if let Some(f) = args.features {
        sweep.feature_set = f;
    }
    if let Some(a) = args.agreement {
        sweep.agreement_set = match a {
            AgreementArg::Training => AgreementSet::Training,
            AgreementArg::Validation => AgreementSet::Validation,
        };
    }
    if let Some(s) = args.seed {
        sweep.master_seed = s;
    }
    if args.no_baselines {
        sweep.baselines = false;
    }
    if args.record_candidates {
        sweep.record_candidates = true;
    }
    if let Some(b) = first_round {
        cfg.change_baseline = b;
    }
    cfg.sweep.validate()?;
    Ok(cfg)
}

/// Loads a cohort from a directory of raw logs, a directory holding only
/// `cohort.csv`, or a cohort CSV file. Returns the digests of what was read.
pub fn load_cohort(path: &Path, assembly: &AssemblyConfig) -> CliResult<(Cohort, BTreeMap<String, String>)> {
    let mut digests = BTreeMap::new();
    let mut digest = |p: &Path| -> CliResult<()> {
        let bytes = fs::read(p).map_err(|e| CliError::Runtime(Error::io(p, e)))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        digests.insert(name, sha256_hex(&bytes));
        Ok(())
    };
    if path.is_file() {
        digest(path)?;
        return Ok((Cohort::read_csv(path)?, digests));
    }
    if !path.is_dir() {
        return Err(CliError::Runtime(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such cohort file or directory"),
        )));
    }
    if path.join(SESSIONS_FILE).exists() {
        for f in [SESSIONS_FILE, ITS_FILE, ASSESSMENTS_FILE, ROSTER_FILE] {
            digest(&path.join(f))?;
        }
        let logs = RawLogs::load_dir(path)?;
        let cohort = assemble_evaluation_periods(&logs.sessions, &logs.its, &logs.assessments, &logs.roster, assembly)?;
        return Ok((cohort, digests));
    }
    let csv = path.join(COHORT_FILE);
    if csv.exists() {
        digest(&csv)?;
        return Ok((Cohort::read_csv(&csv)?, digests));
    }
    Err(CliError::Runtime(Error::io(
        path,
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("neither {SESSIONS_FILE} nor {COHORT_FILE} found"),
        ),
    )))
}

fn analysis(kind: Analysis, args: AnalysisArgs, first_round: Option<ChangeBaseline>) -> CliResult<()> {
    let cfg = resolve_run_config(kind, &args, first_round)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = args.jobs {
            if j == 0 {
                return Err(CliError::Config("--jobs must be at least 1".into()));
            }
            b = b.num_threads(j);
        }
        b.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?
    };
    pool.install(|| execute(&cfg, &args.out))
}

/// Runs a resolved config and writes its outputs into `out`.
pub fn execute(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let (cohort, inputs) = match &cfg.input {
        InputSource::Cohort(p) => load_cohort(p, &cfg.assembly)?,
        InputSource::Synth(spec) => (generate_cohort(spec)?.cohort, BTreeMap::new()),
    };
    log::info!(
        "{} students, {} tutors, {} evaluation periods",
        cohort.students().len(),
        cohort.tutors().len(),
        cohort.len()
    );
    let mut dir = OutputDir::create(out)?;
    let final_report: PipelineReport = match cfg.analysis {
        Analysis::Run => {
            let report = run_sweep(&cohort, &cfg.sweep)?;
            dir.write(REPORT_FILE, &to_json(&report)?)?;
            dir.write(TABLE_FILE, &report.table().to_csv())?;
            report
        }
        Analysis::Change => {
            let report = run_change_pipeline(&cohort, &cfg.sweep, cfg.change_baseline)?;
            dir.write(REPORT_FILE, &to_json(&report)?)?;
            dir.write(TABLE_FILE, &report.table().to_csv())?;
            report
        }
        Analysis::Baselines => {
            let (table, reports) = run_baselines(&cohort, &cfg.sweep)?;
            dir.write(REPORT_FILE, &to_json(&reports)?)?;
            dir.write(TABLE_FILE, &table.to_csv())?;
            reports
                .into_iter()
                .find(|r| r.config.feature_set == FeatureSet::Combined)
                .expect("baselines cover the combined set")
        }
    };
    let tree = &final_report.whole_dataset_tree;
    dir.write(TREE_DOT_FILE, &export_tree(tree, &FEATURE_NAMES, ExportFormat::Dot))?;
    dir.write(TREE_JSON_FILE, &(export_tree(tree, &FEATURE_NAMES, ExportFormat::Json) + "\n"))?;
    log::info!(
        "mean test AUC {:.4}, final tree from fold {} at threshold {}",
        final_report.mean_test_auc,
        final_report.final_model.provenance.fold,
        final_report.final_model.provenance.threshold
    );
    let seeds = (0..cfg.sweep.n_seeds).map(|i| cfg.sweep.forest_seed(i)).collect();
    dir.finish(cfg, seeds, inputs)
}

/// Reads a tree from a tree JSON file, a run report or a baselines report.
pub fn read_tree(path: &Path) -> CliResult<TreeNode> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
    if let Ok(tree) = TreeNode::from_json(&text) {
        return Ok(tree);
    }
    if let Ok(report) = serde_json::from_str::<PipelineReport>(&text) {
        return Ok(report.whole_dataset_tree);
    }
    if let Ok(reports) = serde_json::from_str::<Vec<PipelineReport>>(&text) {
        if let Some(r) = reports.into_iter().find(|r| r.config.feature_set == FeatureSet::Combined) {
            return Ok(r.whole_dataset_tree);
        }
    }
    Err(CliError::Runtime(Error::Inconsistent(format!(
        "{}: not a tree, report or baselines report",
        path.display()
    ))))
}

fn export(args: ExportArgs) -> CliResult<()> {
    let tree = read_tree(&args.model)?;
    let format = match args.format {
        FormatArg::Dot => ExportFormat::Dot,
        FormatArg::Json => ExportFormat::Json,
    };
    let mut text = export_tree(&tree, &FEATURE_NAMES, format);
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match args.out {
        Some(p) => fs::write(&p, text).map_err(|e| CliError::Runtime(Error::io(&p, e))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
