use std::path::PathBuf;
use std::process::ExitCode;

use archopt::cli::{self, CliError, OutputFormat, Overrides, Run, Stage};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "archopt", version, about = "Block-wise architecture search, fusion and training planning")]
struct Opts {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite artifacts produced under a different config.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Run the stages listed in the config (or selected with --stage).
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated subset of library,solve,fuse,plan,curriculum.
        #[arg(long, value_delimiter = ',')]
        stage: Option<Vec<String>>,
    },
    /// Score block variants and write the catalog.
    Library(RunArgs),
    /// Solve the constrained block assignment.
    Solve(RunArgs),
    /// Fuse runs of attention-free blocks in the solved model.
    Fuse(RunArgs),
    /// Search parallelism layouts and stage boundaries.
    Plan(RunArgs),
    /// Build the difficulty curriculum.
    Curriculum(RunArgs),
    /// Summarize an output directory.
    Report {
        /// Output directory of a previous run.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        format: OutputFormat,
    },
}

fn main() -> ExitCode {
    let opts = Opts::parse();
    match execute(opts.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cmd: Command) -> Result<String, CliError> {
    let (args, stages) = match cmd {
        Command::Report { out, format } => return render_report(&out, format),
        Command::Run { args, stage } => {
            let stages = stage
                .map(|v| v.iter().map(|s| s.parse::<Stage>()).collect::<Result<Vec<_>, _>>())
                .transpose()?;
            (args, stages)
        }
        Command::Library(a) => (a, Some(vec![Stage::Library])),
        Command::Solve(a) => (a, Some(vec![Stage::Solve])),
        Command::Fuse(a) => (a, Some(vec![Stage::Fuse])),
        Command::Plan(a) => (a, Some(vec![Stage::Plan])),
        Command::Curriculum(a) => (a, Some(vec![Stage::Curriculum])),
    };
    let overrides = Overrides { stages, out: args.out.clone(), seed: args.seed, force: args.force };
    let run = Run::load(&args.config, &overrides)?;
    let statuses = run.run_pipeline()?;
    match args.format {
        OutputFormat::Json => {
            let stages: Vec<_> = statuses
                .iter()
                .map(|s| serde_json::json!({"stage": s.stage.name(), "reused": s.reused}))
                .collect();
            Ok(format!(
                "{}\n",
                serde_json::json!({
                    "config_hash": run.config_hash,
                    "seed": run.config.seed,
                    "output_dir": run.out_dir,
                    "stages": stages,
                })
            ))
        }
        OutputFormat::Csv => {
            let mut s = String::from("stage,reused\n");
            for st in &statuses {
                s.push_str(&format!("{},{}\n", st.stage.name(), st.reused));
            }
            Ok(s)
        }
        OutputFormat::Text => {
            let mut s = format!("config hash {}\n", run.config_hash);
            for st in &statuses {
                let what = if st.reused { "reused" } else { "done" };
                s.push_str(&format!("{:<11} {what}\n", st.stage.name()));
            }
            s.push_str(&format!("artifacts in {}\n", run.out_dir.display()));
            Ok(s)
        }
    }
}

fn render_report(out: &std::path::Path, format: OutputFormat) -> Result<String, CliError> {
    let rep = cli::report(out)?;
    Ok(match format {
        OutputFormat::Text => rep.to_text(),
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(&rep).map_err(|e| CliError::Internal(e.to_string()))?;
            s.push('\n');
            s
        }
        OutputFormat::Csv => rep.tables.iter().map(|(name, body)| format!("## {name}\n{body}")).collect(),
    })
}
