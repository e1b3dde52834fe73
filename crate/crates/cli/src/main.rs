use std::path::PathBuf;

use clap::{Parser, Subcommand};
use stylefed_cli::{compare_experiment, exit_code, load_spec, run_experiment, Overrides};
use stylefed_core::federation::Method;
use stylefed_core::Result;

#[derive(Parser)]
#[command(
    name = "stylefed",
    version,
    about = "Federated prototype-learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML or JSON spec file.
    Run {
        spec: PathBuf,
        /// Output directory (overrides the spec).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (overrides the spec).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (overrides the spec).
        #[arg(long)]
        threads: Option<usize>,
        /// Also write per-sample personalized features.
        #[arg(long)]
        dump_embeddings: bool,
        /// Also write the current per-class attention weights.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Run several method arms on the same seeds and compare them.
    Compare {
        spec: PathBuf,
        /// Comma-separated arms: full, ablation_attention_only, uniform_average.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            spec,
            out,
            seed,
            threads,
            dump_embeddings,
            dump_attention,
        } => {
            let overrides = Overrides {
                seed,
                out_dir: out,
                threads,
                dump_embeddings,
                dump_attention,
            };
            let resolved = load_spec(&spec, &overrides)?;
            let artifacts = run_experiment(&resolved)?;
            println!(
                "wrote {} and {}",
                artifacts.metrics_path.display(),
                artifacts.summary_path.display()
            );
            Ok(())
        }
        Command::Compare {
            spec,
            methods,
            out,
            seed,
            threads,
        } => {
            let methods: Vec<Method> = methods
                .iter()
                .map(|m| m.parse())
                .collect::<Result<Vec<Method>>>()?;
            let overrides = Overrides {
                seed,
                out_dir: out,
                threads,
                ..Overrides::default()
            };
            let resolved = load_spec(&spec, &overrides)?;
            let comparison = compare_experiment(&resolved, &methods)?;
            for pair in &comparison.pairs {
                let p = pair
                    .wilcoxon_p
                    .map(|p| format!("{p:.6}"))
                    .unwrap_or_else(|| "n/a".into());
                println!(
                    "{} vs {}: mean diff {:+.4}, Wilcoxon p {}",
                    pair.a.as_str(),
                    pair.b.as_str(),
                    pair.mean_diff,
                    p
                );
            }
            println!(
                "wrote {}",
                resolved.out_dir.join("comparison.json").display()
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
