use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dropnet::data::{load_mnist_binary, write_examples};
use dropnet::theory::compute_bounds;
use dropnet_cli::config::parse_config;
use dropnet_cli::experiment::{print_lemma_summary, run_experiment, Mode};
use dropnet_cli::CliError;

#[derive(Parser)]
#[command(name = "dropnet", version, about = "Dropout training of two-layer ReLU networks, with analysis checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every sweep cell and write metrics, summary and lemma report.
    Run { config: PathBuf },
    /// Run only the lemma checks and write the lemma report.
    Verify { config: PathBuf },
    /// Print the bound constants for one configuration.
    Bounds {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        eta: f64,
        #[arg(long = "T")]
        iterations: usize,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Print JSON instead of `key = value` lines.
        #[arg(long)]
        json: bool,
    },
    /// Export a binary digit pair from MNIST IDX files as text examples.
    MnistPrepare {
        dir: PathBuf,
        #[arg(long)]
        pos: u8,
        #[arg(long)]
        neg: u8,
        /// Defaults to `<dir>/mnist_<pos>_<neg>.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = &mut io::stdout().lock();
    match cli.command {
        Command::Run { config } => {
            let spec = parse_config(&fs::read_to_string(&config)?)?;
            let res = run_experiment(&spec, Mode::Run)?;
            writeln!(stdout, "wrote {} cells to {}", res.cells.len(), res.dir.display())?;
            print_lemma_summary(&res.lemma_file, stdout)?;
        }
        Command::Verify { config } => {
            let spec = parse_config(&fs::read_to_string(&config)?)?;
            let res = run_experiment(&spec, Mode::Verify)?;
            print_lemma_summary(&res.lemma_file, stdout)?;
            writeln!(stdout, "wrote {}", res.dir.join("lemma_report.json").display())?;
        }
        Command::Bounds {
            gamma,
            eta,
            iterations,
            m,
            d,
            delta,
            json,
        } => {
            let r = compute_bounds(gamma, eta, iterations, m, d, delta)?;
            if json {
                serde_json::to_writer_pretty(&mut *stdout, &r)?;
                writeln!(stdout)?;
            } else {
                for (k, v) in [
                    ("gamma", r.gamma),
                    ("eta", r.eta),
                    ("T", r.iterations as f64),
                    ("m", r.m as f64),
                    ("d", r.d as f64),
                    ("delta", r.delta),
                    ("c", r.c),
                    ("lambda", r.lambda),
                    ("m_required", r.m_required),
                    ("thm1_bound", r.thm1_bound),
                    ("thm2_bound", r.thm2_bound),
                    ("worst_case_loss", r.worst_case_loss),
                ] {
                    writeln!(stdout, "{k:<17}= {v}")?;
                }
                writeln!(stdout, "{:<17}= {}", "width_sufficient", r.width_sufficient)?;
                writeln!(stdout, "{:<17}= {}", "log_clamped", r.log_clamped)?;
            }
        }
        Command::MnistPrepare { dir, pos, neg, out } => {
            let examples = load_mnist_binary(&dir, pos, neg)?;
            let path = out.unwrap_or_else(|| dir.join(format!("mnist_{pos}_{neg}.txt")));
            write_examples(BufWriter::new(File::create(&path)?), &examples)?;
            writeln!(stdout, "wrote {} examples to {}", examples.len(), path.display())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
