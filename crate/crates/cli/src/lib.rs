//! Command-line front end: dataset generation, training, evaluation,
//! ablation sweeps and metrics export.
//!
//! Exit codes: 0 success, 1 training diverged, 2 usage or invalid config,
//! 3 I/O failure, 4 incompatible checkpoint, dataset or config.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

pub use args::Cli;
pub use config::RunConfig;
pub use error::CliError;

use args::Command;

/// Runs one parsed invocation, printing its human-readable output.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => println!("{}", commands::cmd_gen_data(a)?),
        Command::Train(a) => {
            let run = commands::cmd_train(a)?;
            println!(
                "trained {} steps, final format+acc reward {:.4}, checkpoint {}",
                run.metrics.len(),
                commands::final_comparable_reward(&run.metrics),
                run.final_checkpoint().display()
            );
            if let Some(e) = &run.eval {
                println!(
                    "eval: acc@0.5 {:.4}, count acc {:.4}, mean iou {:.4}",
                    e.overall.acc_at_0_5, e.overall.count_acc, e.overall.mean_iou
                );
            }
        }
        Command::Eval(a) => {
            let report = commands::cmd_eval(a)?;
            if a.out.is_none() {
                print!("{}", commands::report_json(&report));
            }
        }
        Command::PlotData(a) => {
            let text = commands::cmd_plot_data(a)?;
            if a.out.is_none() {
                print!("{text}");
            }
        }
        Command::Ablate(a) => println!("wrote {}", commands::cmd_ablate(a)?.display()),
    }
    Ok(())
}
