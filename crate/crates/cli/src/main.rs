use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nmtbench::metrics::{evaluate, EvaluationReport};
use nmtbench::models::DecodeSettings;
use nmtbench::orchestrator::{
    autobuild, deploy, run_dir_for, translate_with, AutobuildOptions, LoadedBundle, OrchestratorError, PipelineStage, RunLayout, RunSpec,
};

#[derive(Parser)]
#[command(name = "nmtbench", version, about = "Desk-scale neural machine translation workbench")]
struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `output_root/run_name` from the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides the split and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the corpus into train/valid/test.
    Split,
    /// Train source and target subword models.
    SubwordTrain,
    /// Train the model.
    Train,
    /// Translate the test split, or lines from stdin with `--model`.
    Translate(TranslateArgs),
    /// Score the test translations, or any hypothesis/reference files.
    Evaluate(EvaluateArgs),
    /// Run every remaining stage.
    Autobuild,
    /// Write the results report and print it.
    Report,
    /// Copy the best checkpoint and subword models into a bundle.
    Deploy {
        #[arg(long)]
        dest: PathBuf,
    },
    /// Start the HTTP gateway.
    Serve {
        /// Directory holding `models/` and `runs/`.
        #[arg(long, default_value = ".")]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Print the green report of a run.
    Green,
}

#[derive(Args)]
struct TranslateArgs {
    /// Bundle directory; repeat for an ensemble.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_length: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, requires = "reference")]
    hyp: Option<PathBuf>,
    #[arg(long = "ref", requires = "hyp")]
    reference: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Run(OrchestratorError),
    Usage(String),
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        Self::Run(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Run(e) => e.exit_code() as u8,
            Self::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Run(e) => e.fmt(f),
            Self::Usage(m) => f.write_str(m),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(OrchestratorError::Io { path: path.to_path_buf(), source: e })
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

impl Cli {
    fn spec(&self) -> Result<RunSpec, CliError> {
        let path = self.config.as_ref().ok_or_else(|| CliError::Usage("this command needs --config".into()))?;
        let spec = RunSpec::from_file(path)?;
        let Some(seed) = self.seed else { return Ok(spec) };
        let mut config = spec.config;
        let mut hp = config.hyperparameters();
        hp.seed = seed;
        config.hyperparameters = Some(hp);
        if config.corpus.is_some() {
            config.split.get_or_insert_with(Default::default).seed = seed;
        }
        Ok(RunSpec::from_config(config))
    }

    /// The run directory, from `--run-dir` or the config.
    fn layout(&self) -> Result<RunLayout, CliError> {
        match (&self.run_dir, &self.config) {
            (Some(dir), _) => Ok(RunLayout::new(dir.clone())),
            (None, Some(_)) => Ok(RunLayout::new(run_dir_for(&self.spec()?.config))),
            (None, None) => Err(CliError::Usage("give --run-dir or --config".into())),
        }
    }

    fn pipeline(&self, until: PipelineStage) -> Result<RunLayout, CliError> {
        let spec = self.spec()?;
        let opts = AutobuildOptions { until: Some(until), run_dir: self.run_dir.clone(), ..Default::default() };
        let dir = opts.run_dir.clone().unwrap_or_else(|| run_dir_for(&spec.config));
        let manifest = autobuild(&spec, opts)?;
        log::info!("run {} is at {}", manifest.run_id, dir.display());
        Ok(RunLayout::new(dir))
    }
}

fn print_evaluation(path: &Path) -> Result<(), CliError> {
    let report: EvaluationReport =
        serde_json::from_str(&read(path)?).map_err(|e| CliError::Run(OrchestratorError::CorruptManifest(format!("{}: {e}", path.display()))))?;
    print!("{}", report.table());
    Ok(())
}

fn lines(text: &str) -> Vec<String> {
    text.lines().map(String::from).collect()
}

fn translate_stdin(args: &TranslateArgs) -> Result<(), CliError> {
    let bundles = args.models.iter().map(|p| LoadedBundle::load(p)).collect::<Result<Vec<_>, _>>()?;
    let mut settings = bundles[0].decode;
    settings.beam_size = args.beam.unwrap_or(settings.beam_size);
    settings.alpha = args.alpha.unwrap_or(settings.alpha);
    settings.max_length = args.max_length.unwrap_or(settings.max_length);
    let input: Vec<String> = std::io::stdin().lock().lines().collect::<Result<_, _>>().map_err(|e| io_err(Path::new("<stdin>"), e))?;
    let refs: Vec<&LoadedBundle> = bundles.iter().collect();
    let out = translate_with(&refs, &input, &settings).map_err(|e| CliError::Run(OrchestratorError::Bundle(e.to_string())))?;
    let mut stdout = std::io::stdout().lock();
    for t in out {
        writeln!(stdout, "{}", t.text).map_err(|e| io_err(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Split => cli.pipeline(PipelineStage::Split).map(drop),
        Command::SubwordTrain => cli.pipeline(PipelineStage::Subword).map(drop),
        Command::Train => cli.pipeline(PipelineStage::Train).map(drop),
        Command::Translate(args) if !args.models.is_empty() => translate_stdin(args),
        Command::Translate(_) => {
            let layout = cli.pipeline(PipelineStage::Translate)?;
            print!("{}", read(&layout.hypotheses())?);
            Ok(())
        }
        Command::Evaluate(EvaluateArgs { hyp: Some(h), reference: Some(r) }) => {
            let config = match &cli.config {
                Some(_) => cli.spec()?.config.evaluation,
                None => Default::default(),
            };
            let report =
                evaluate(&lines(&read(h)?), &lines(&read(r)?), &config, &nmtbench::metrics::Metric::ALL).map_err(|e| CliError::Usage(e.to_string()))?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Evaluate(_) => print_evaluation(&cli.pipeline(PipelineStage::Evaluate)?.evaluation_json()),
        Command::Autobuild => cli.pipeline(PipelineStage::Report).map(drop),
        Command::Report => {
            let layout = cli.pipeline(PipelineStage::Report)?;
            print!("{}", read(&layout.results())?);
            Ok(())
        }
        Command::Deploy { dest } => {
            let layout = cli.layout()?;
            let decode = match cli.config {
                Some(_) => cli.spec()?.config.decode,
                None => RunSpec::from_file(&layout.config()).map(|s| s.config.decode).unwrap_or_else(|_| DecodeSettings::default()),
            };
            let info = deploy(&layout.root, dest, &decode)?;
            println!("deployed {} step {} to {}", info.run_id, info.step, dest.display());
            Ok(())
        }
        Command::Serve { root, addr } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| io_err(root, e))?;
            rt.block_on(nmtbench_gateway::serve(root.clone(), *addr)).map_err(|e| io_err(root, e))
        }
        Command::Green => {
            print!("{}", read(&cli.layout()?.green_text())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
