//! Command implementations behind the `lab-anomaly` binary.
//!
//! Every command returns a process exit status rather than exiting itself, so
//! [`run`] can be driven in-process with captured streams.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lab_anomaly::client::{
    ClientError, MockProvider, MockScript, OpenAiCompatibleProvider, Provider, ProviderReply, ResponseCache,
    VisionRequest,
};
use lab_anomaly::eval::{
    compute_by_level, load_manifest, read_results, run_eval, write_report, write_results, ReportFormat, ResultsError,
};
use lab_anomaly::prompt::PromptError;
use lab_anomaly::workflow::{parse_workflow, validate_workflow, WorkflowError};
use lab_anomaly::{
    assemble_prompt, parse_judgment, EvalRecord, MetricMode, Observation, PromptLevel, ProviderConfig, Verdict,
    VlmClient, Workflow,
};

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const INVALID: i32 = 2;
    pub const MISSING_CONTENT: i32 = 3;
    pub const PROVIDER: i32 = 4;
    pub const ANOMALOUS: i32 = 10;
    pub const UNCERTAIN: i32 = 11;
    pub const USAGE: i32 = 64;
}

#[derive(Debug, Parser)]
#[command(
    name = "lab-anomaly",
    version,
    about = "Vision-language anomaly checks for lab workflows"
)]
pub struct Cli {
    /// Log retries, cache hits and rationales to standard error.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a workflow file against its invariants.
    Validate {
        #[arg(long)]
        workflow: PathBuf,
    },
    /// Print the prompt for one monitoring point at one level.
    RenderPrompt {
        #[arg(long)]
        workflow: PathBuf,
        #[arg(long)]
        point: String,
        #[arg(long, value_parser = parse_level)]
        level: PromptLevel,
    },
    /// Judge a single image at one monitoring point.
    Judge {
        #[arg(long)]
        workflow: PathBuf,
        #[arg(long)]
        point: String,
        #[arg(long, value_parser = parse_level)]
        level: PromptLevel,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Judge every manifest sample at every requested level.
    Eval {
        #[arg(long)]
        workflow: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated prompt levels.
        #[arg(long, value_parser = parse_levels, value_delimiter = ',', default_value = "1,2,3,4")]
        levels: Vec<PromptLevel>,
        /// Concurrent provider requests; 0 uses one per core.
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Population)]
        mode: ModeArg,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Summarize a results file into per-level tables.
    Report {
        /// Results file written by `eval`.
        results: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Population)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = FormatArg::Table)]
        format: FormatArg,
    },
    /// Walk the workflow checkpoints in order, judging one image each.
    Monitor {
        #[arg(long)]
        workflow: PathBuf,
        /// Directory of images (taken in lexical order) or `-` to read one
        /// path per line from standard input.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_parser = parse_level, default_value = "2")]
        level: PromptLevel,
        #[arg(long)]
        halt_on_anomaly: bool,
        #[command(flatten)]
        provider: ProviderArgs,
    },
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum, default_value_t = ProviderKind::Live)]
    pub provider: ProviderKind,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// JSON provider settings; individual flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reuse responses stored under this directory.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Live,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Population,
    Class,
    Both,
}

impl ModeArg {
    fn modes(self) -> &'static [MetricMode] {
        match self {
            ModeArg::Population => &[MetricMode::PopulationRelative],
            ModeArg::Class => &[MetricMode::ClassConditional],
            ModeArg::Both => &[MetricMode::PopulationRelative, MetricMode::ClassConditional],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Table,
    Json,
}

fn parse_level(s: &str) -> Result<PromptLevel, String> {
    s.parse().map_err(|e: PromptError| e.to_string())
}

fn parse_levels(s: &str) -> Result<PromptLevel, String> {
    parse_level(s.trim())
}

/// Standard streams, swappable for tests.
pub struct Io<'a> {
    pub stdin: &'a mut dyn BufRead,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

/// A failed command: exit status plus the message for standard error.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type Outcome = Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, io: &mut Io<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(io.stderr, "{rendered}");
            } else {
                let _ = write!(io.stdout, "{rendered}");
            }
            return code;
        }
    };
    match dispatch(cli, io) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(io.stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli, io: &mut Io<'_>) -> Outcome {
    let verbose = cli.verbose;
    match cli.command {
        Command::Validate { workflow } => cmd_validate(&workflow, io),
        Command::RenderPrompt { workflow, point, level } => cmd_render_prompt(&workflow, &point, level, io),
        Command::Judge {
            workflow,
            point,
            level,
            image,
            provider,
        } => cmd_judge(&workflow, &point, level, &image, &provider, verbose, io),
        Command::Eval {
            workflow,
            manifest,
            levels,
            parallelism,
            out,
            mode,
            provider,
        } => cmd_eval(&workflow, &manifest, &levels, parallelism, &out, mode, &provider, io),
        Command::Report { results, mode, format } => cmd_report(&results, mode, format, io),
        Command::Monitor {
            workflow,
            image,
            level,
            halt_on_anomaly,
            provider,
        } => cmd_monitor(&workflow, &image, level, halt_on_anomaly, &provider, verbose, io),
    }
}

fn write_out(w: &mut dyn Write, text: &str) -> Result<(), Failure> {
    w.write_all(text.as_bytes())
        .map_err(|e| Failure::new(exit::FAILURE, format!("cannot write output: {e}")))
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(exit::FAILURE, format!("cannot read {}: {e}", path.display())))
}

fn read_workflow(path: &Path) -> Result<Workflow, Failure> {
    let source = read_file(path)?;
    parse_workflow(&source).map_err(|e| Failure::new(exit::FAILURE, format!("{}: {e}", path.display())))
}

/// Reads a workflow and insists that it is valid.
fn load_valid_workflow(path: &Path) -> Result<Workflow, Failure> {
    let w = read_workflow(path)?;
    let violations = validate_workflow(&w);
    if violations.is_empty() {
        return Ok(w);
    }
    let listing: Vec<String> = violations.iter().map(ToString::to_string).collect();
    Err(Failure::new(
        exit::INVALID,
        format!("{} is invalid: {}", path.display(), listing.join("; ")),
    ))
}

fn prompt_failure(e: PromptError) -> Failure {
    match e {
        PromptError::Workflow(WorkflowError::PointNotFound(_)) => Failure::new(exit::INVALID, e.to_string()),
        PromptError::MissingContent { .. } => Failure::new(exit::MISSING_CONTENT, e.to_string()),
        _ => Failure::new(exit::FAILURE, e.to_string()),
    }
}

fn cmd_validate(path: &Path, io: &mut Io<'_>) -> Outcome {
    let w = read_workflow(path)?;
    let violations = validate_workflow(&w);
    for v in &violations {
        write_out(io.stdout, &format!("{v}\n"))?;
    }
    Ok(if violations.is_empty() { exit::OK } else { exit::INVALID })
}

fn cmd_render_prompt(path: &Path, point: &str, level: PromptLevel, io: &mut Io<'_>) -> Outcome {
    let w = load_valid_workflow(path)?;
    let bundle = assemble_prompt(&w, point, level).map_err(prompt_failure)?;
    write_out(
        io.stdout,
        &format!(
            "# level={} point={point} hash={}\n{}",
            level.get(),
            bundle.content_hash,
            bundle.rendered
        ),
    )?;
    Ok(exit::OK)
}

/// Wraps a provider to count the calls that actually go out.
struct Counting {
    inner: Arc<dyn Provider>,
    calls: AtomicUsize,
}

impl Provider for Counting {
    fn complete(&self, req: &VisionRequest<'_>) -> Result<ProviderReply, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }
}

fn build_client(args: &ProviderArgs) -> Result<(VlmClient, Arc<Counting>), Failure> {
    let config_failure = |e: ClientError| Failure::new(exit::FAILURE, e.to_string());
    let mut config = match &args.config {
        Some(path) => serde_json::from_str::<ProviderConfig>(&read_file(path)?)
            .map_err(|e| Failure::new(exit::FAILURE, format!("{}: {e}", path.display())))?,
        None => ProviderConfig::default(),
    };
    if let Some(endpoint) = &args.endpoint {
        config.endpoint_url.clone_from(endpoint);
    }
    if let Some(model) = &args.model {
        config.model_name.clone_from(model);
    }
    let inner: Arc<dyn Provider> = match args.provider {
        ProviderKind::Mock => {
            let path = args
                .mock_script
                .as_deref()
                .ok_or_else(|| Failure::new(exit::USAGE, "--provider mock requires --mock-script"))?;
            Arc::new(MockProvider::new(MockScript::from_path(path).map_err(config_failure)?))
        }
        ProviderKind::Live => Arc::new(OpenAiCompatibleProvider::new(&config).map_err(config_failure)?),
    };
    let counting = Arc::new(Counting {
        inner,
        calls: AtomicUsize::new(0),
    });
    let mut client = VlmClient::new(counting.clone(), config).map_err(config_failure)?;
    if let Some(dir) = &args.cache_dir {
        client = client.with_cache(ResponseCache::new(dir));
    }
    Ok((client, counting))
}

fn verdict_status(v: Verdict) -> i32 {
    match v {
        Verdict::Normal => exit::OK,
        Verdict::Anomalous => exit::ANOMALOUS,
        Verdict::Uncertain => exit::UNCERTAIN,
    }
}

fn load_observation(path: &Path, point: &str) -> Result<Observation, Failure> {
    Observation::from_path(path, point).map_err(|e| Failure::new(exit::FAILURE, e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_judge(
    workflow: &Path,
    point: &str,
    level: PromptLevel,
    image: &Path,
    provider: &ProviderArgs,
    verbose: bool,
    io: &mut Io<'_>,
) -> Outcome {
    let w = load_valid_workflow(workflow)?;
    let bundle = assemble_prompt(&w, point, level).map_err(prompt_failure)?;
    let obs = load_observation(image, point)?;
    let (client, _) = build_client(provider)?;
    let response = client
        .judge(&bundle, &obs)
        .map_err(|e| Failure::new(exit::PROVIDER, e.to_string()))?;
    let judgment = parse_judgment(&response.text);
    write_out(
        io.stdout,
        &format!("verdict={} rule={}\n", judgment.verdict.as_str(), judgment.matched_rule),
    )?;
    if verbose {
        write_out(io.stdout, &format!("{}\n", judgment.rationale))?;
    }
    Ok(verdict_status(judgment.verdict))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    workflow: &Path,
    manifest: &Path,
    levels: &[PromptLevel],
    parallelism: usize,
    out: &Path,
    mode: ModeArg,
    provider: &ProviderArgs,
    io: &mut Io<'_>,
) -> Outcome {
    let w = load_valid_workflow(workflow).map_err(|f| Failure::new(exit::FAILURE, f.message))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let samples = load_manifest(&read_file(manifest)?, Some(base))
        .map_err(|e| Failure::new(exit::FAILURE, format!("{}: {e}", manifest.display())))?;
    if samples.is_empty() {
        return Err(Failure::new(
            exit::FAILURE,
            format!("{}: no samples", manifest.display()),
        ));
    }
    let (client, counter) = build_client(provider)?;
    let records =
        run_eval(&w, &samples, levels, &client, parallelism).map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?;
    fs::write(out, write_results(&records))
        .map_err(|e| Failure::new(exit::FAILURE, format!("cannot write {}: {e}", out.display())))?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let _ = writeln!(
        io.stderr,
        "{} records written to {}; provider calls: {}; failed requests: {failed}",
        records.len(),
        out.display(),
        counter.calls.load(Ordering::SeqCst)
    );
    print_tables(&records, mode, ReportFormat::Table, io)?;
    Ok(exit::OK)
}

fn print_tables(records: &[EvalRecord], mode: ModeArg, format: ReportFormat, io: &mut Io<'_>) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for &m in mode.modes() {
        reports.extend(compute_by_level(records, m).map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?);
    }
    write_out(io.stdout, &write_report(&reports, format))
}

fn cmd_report(path: &Path, mode: ModeArg, format: FormatArg, io: &mut Io<'_>) -> Outcome {
    let records = read_results(&read_file(path)?).map_err(|e| match e {
        ResultsError::Empty => Failure::new(exit::FAILURE, format!("{}: no records", path.display())),
        other => Failure::new(exit::FAILURE, format!("{}: {other}", path.display())),
    })?;
    let format = match format {
        FormatArg::Table => ReportFormat::Table,
        FormatArg::Json => ReportFormat::Json,
    };
    print_tables(&records, mode, format, io)?;
    Ok(exit::OK)
}

/// Supplies one image path per checkpoint.
enum ImageSource {
    Listed(std::vec::IntoIter<PathBuf>),
    Stdin,
}

impl ImageSource {
    fn next(&mut self, stdin: &mut dyn BufRead) -> Result<Option<PathBuf>, Failure> {
        match self {
            ImageSource::Listed(paths) => Ok(paths.next()),
            ImageSource::Stdin => loop {
                let mut line = String::new();
                let n = stdin
                    .read_line(&mut line)
                    .map_err(|e| Failure::new(exit::FAILURE, format!("cannot read standard input: {e}")))?;
                if n == 0 {
                    return Ok(None);
                }
                let line = line.trim();
                if !line.is_empty() {
                    return Ok(Some(PathBuf::from(line)));
                }
            },
        }
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries =
        fs::read_dir(dir).map_err(|e| Failure::new(exit::FAILURE, format!("cannot read {}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Failure::new(exit::FAILURE, format!("cannot read {}: {e}", dir.display())))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

#[allow(clippy::too_many_arguments)]
fn cmd_monitor(
    workflow: &Path,
    image: &Path,
    level: PromptLevel,
    halt_on_anomaly: bool,
    provider: &ProviderArgs,
    verbose: bool,
    io: &mut Io<'_>,
) -> Outcome {
    let w = load_valid_workflow(workflow)?;
    let checkpoints = w.checkpoints();
    let total = checkpoints.len();
    let mut source = if image == Path::new("-") {
        ImageSource::Stdin
    } else {
        let paths = list_images(image)?;
        if paths.len() < total {
            return Err(Failure::new(
                exit::FAILURE,
                format!(
                    "image source underrun: {} has {} images for {total} checkpoints",
                    image.display(),
                    paths.len()
                ),
            ));
        }
        ImageSource::Listed(paths.into_iter())
    };
    // prompts first, so a broken point fails before any image is consumed
    let mut bundles = Vec::with_capacity(total);
    for (_, point) in &checkpoints {
        bundles.push(assemble_prompt(&w, &point.id, level).map_err(prompt_failure)?);
    }
    let (client, _) = build_client(provider)?;

    let mut worst = exit::OK;
    for (i, ((slot, point), bundle)) in checkpoints.iter().zip(&bundles).enumerate() {
        let Some(path) = source.next(io.stdin)? else {
            return Err(Failure::new(
                exit::FAILURE,
                format!("image source underrun: no image for checkpoint {} of {total}", i + 1),
            ));
        };
        let obs = load_observation(&path, &point.id)?;
        let response = client
            .judge(bundle, &obs)
            .map_err(|e| Failure::new(exit::PROVIDER, format!("checkpoint {}: {e}", i + 1)))?;
        let judgment = parse_judgment(&response.text);
        let step = &w.steps[slot.step_index];
        let head = format!(
            "checkpoint {}/{total} step={} phase={} point={} image={} verdict={} rule={}",
            i + 1,
            step.id,
            slot.phase.as_str(),
            point.id,
            path.display(),
            judgment.verdict.as_str(),
            judgment.matched_rule,
        );
        let line = match judgment.verdict {
            Verdict::Normal => format!("{head}: no anomaly\n"),
            Verdict::Anomalous => format!(
                "{head}: anomaly\nALERT: {} at step `{}` ({}); expected: {}\n",
                point.anomaly_label.abnormal_condition,
                step.id,
                step.name,
                point.detection_target.statement()
            ),
            Verdict::Uncertain => format!("{head}: uncertain, operator review needed\n"),
        };
        write_out(io.stdout, &line)?;
        if verbose {
            write_out(io.stdout, &format!("  rationale: {}\n", judgment.rationale))?;
        }
        let status = verdict_status(judgment.verdict);
        if judgment.verdict == Verdict::Anomalous && halt_on_anomaly {
            write_out(io.stdout, &format!("halted after checkpoint {}/{total}\n", i + 1))?;
            return Ok(status);
        }
        worst = match (worst, status) {
            (exit::ANOMALOUS, _) | (_, exit::ANOMALOUS) => exit::ANOMALOUS,
            (exit::UNCERTAIN, _) | (_, exit::UNCERTAIN) => exit::UNCERTAIN,
            _ => exit::OK,
        };
    }
    Ok(worst)
}
