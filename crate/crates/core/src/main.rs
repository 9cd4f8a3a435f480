use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use confu::cli;
use confu::config::ExperimentConfig;
use confu::objectives::ObjectiveKind;
use confu::{Error, Result};

#[derive(Parser)]
#[command(
    name = "confu",
    version,
    about = "Contrastive fusion experiments on synthetic XOR data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus flags that override individual fields of it.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    p_hat: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                ExperimentConfig::from_json(&text)?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.xor.seed = s;
            cfg.train.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.output_dir = d.clone();
        }
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(p_hat => xor.p_hat);
        set!(epochs => train.epochs);
        set!(batch_size => train.batch_size);
        set!(learning_rate => train.learning_rate);
        set!(lambda => train.lambda);
        set!(mask_ratio => train.mask_ratio);
        set!(objective => train.objective);
        set!(embed_dim => model.embed_dim);
        set!(hidden_dim => model.hidden_dim);
        set!(workers => workers);
        cfg.resolve()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test XOR datasets and a manifest.
    GenXor(ConfigArgs),
    /// Train one model; writes a checkpoint, a JSONL trace and a report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by gen-xor; data is generated inline otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured retrieval specs.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every grid cell; resumable.
    Sweep(ConfigArgs),
    /// Print exact total correlation per XOR mixing probability.
    TcOracle {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
        p_hat: Vec<f64>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenXor(a) => {
            let cfg = a.load()?;
            let m = cli::cmd_gen_xor(&cfg)?;
            println!(
                "wrote {} (config {})",
                cfg.output_dir.join("data").display(),
                m.config_hash
            );
        }
        Command::Train { cfg, data } => {
            let cfg = cfg.load()?;
            let s = cli::cmd_train(&cfg, data.as_deref())?;
            println!("trained {} for {} steps", s.objective, s.steps);
            for r in &s.final_eval {
                println!(
                    "  X{} from {}: {} = {:.4} (chance {:.4})",
                    r.spec.target,
                    r.spec.queries_label(),
                    r.spec.metric,
                    r.value,
                    r.chance
                );
            }
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
        } => {
            let cfg = cfg.load()?;
            let rows = cli::cmd_eval(&cfg, &checkpoint, data.as_deref())?;
            for r in rows {
                println!(
                    "X{} from {}: {} = {}",
                    r.target, r.queries, r.metric, r.value
                );
            }
        }
        Command::Sweep(a) => {
            let cfg = a.load()?;
            let out = cli::cmd_sweep(&cfg)?;
            println!(
                "{} cells, {} rows -> {}",
                out.cells,
                out.rows.len(),
                cfg.output_dir.join("sweep.csv").display()
            );
            if let Some((cell, err)) = out.failures.into_iter().next() {
                eprintln!("cell {} seed {} failed", cell.label(), cell.seed);
                return Err(err);
            }
        }
        Command::TcOracle { p_hat, out } => {
            let rows = cli::cmd_tc_oracle(&p_hat)?;
            print!("{}", cli::tc_rows_table(&rows));
            if let Some(p) = out {
                cli::write_tc_csv(&p, &rows)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
