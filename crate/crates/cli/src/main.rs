mod commands;
mod config;
mod report;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commands::{
    BranchingArgs, ClassifyArgs, DiffusionArgs, LimitLawArgs, OracleCheckArgs, RenewalArgs, TailsArgs, WalkArgs,
};
use config::{CommonArgs, ConfigError};
use report::Report;

const EXIT_ASSERTION: u8 = 3;
const EXIT_CONFIG: u8 = 2;
const EXIT_TRUNCATION: u8 = 4;

/// Seeded experiments on excited random walks in Markovian cookie environments.
///
/// Every experiment writes `report.json` and its CSV files to `--out`.
/// Replica `i` of a batch uses seed `seed ⊕ i`, so output bytes depend only
/// on the options, never on `--threads`.
#[derive(Parser)]
#[command(name = "erw", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drift, phase and limit regime of an environment.
    Classify(ClassifyArgs),
    /// Endpoints and level hitting times of walks.
    Walk(WalkArgs),
    /// Coupled branching chains, anchor-return moments and survival episodes.
    Branching(BranchingArgs),
    /// Renewal cycles of the backward chain and the speed formula.
    Renewal(RenewalArgs),
    /// Tail exponents of return times and areas.
    Tails(TailsArgs),
    /// Normalized endpoints for the limit regime of the environment.
    LimitLaw(LimitLawArgs),
    /// Exit probabilities and hitting times of the squared Bessel diffusion.
    Diffusion(DiffusionArgs),
    /// Exact step and anchor-return laws against samplers.
    OracleCheck(OracleCheckArgs),
    /// Names and descriptions of the builtin environments.
    ListBuiltins,
}

impl Command {
    fn common(&self) -> Option<&CommonArgs> {
        Some(match self {
            Self::Classify(a) => &a.common,
            Self::Walk(a) => &a.common,
            Self::Branching(a) => &a.common,
            Self::Renewal(a) => &a.common,
            Self::Tails(a) => &a.common,
            Self::LimitLaw(a) => &a.common,
            Self::Diffusion(a) => &a.common,
            Self::OracleCheck(a) => &a.common,
            Self::ListBuiltins => return None,
        })
    }

    fn run(&self) -> Result<Report, ConfigError> {
        match self {
            Self::Classify(a) => commands::classify(a),
            Self::Walk(a) => commands::walk(a),
            Self::Branching(a) => commands::branching(a),
            Self::Renewal(a) => commands::renewal(a),
            Self::Tails(a) => commands::tails(a),
            Self::LimitLaw(a) => commands::limit_law(a),
            Self::Diffusion(a) => commands::diffusion(a),
            Self::OracleCheck(a) => commands::oracle_check(a),
            Self::ListBuiltins => unreachable!("handled before dispatch"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(common) = cli.command.common() else {
        for (name, description) in erw_core::list_builtins() {
            println!("{name}\t{description}");
        }
        return ExitCode::SUCCESS;
    };
    let prepared = common.validate().and_then(|()| {
        std::fs::create_dir_all(&common.out).map_err(|e| ConfigError::Output(format!("{}: {e}", common.out.display())))
    });
    let outcome = prepared.and_then(|()| {
        let report = cli.command.run()?;
        report.write(&common.out)?;
        Ok(report)
    });
    match outcome {
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Ok(report) => {
            for a in &report.assertions {
                let verdict = if a.passed { "pass" } else { "FAIL" };
                println!(
                    "{verdict}  {}  value={:.6e} threshold={:.6e}",
                    a.name, a.value, a.threshold
                );
            }
            println!("report: {}", common.out.join("report.json").display());
            if report.truncated_fraction > common.max_truncated {
                eprintln!(
                    "truncated fraction {:.4} exceeds --max-truncated {}",
                    report.truncated_fraction, common.max_truncated
                );
                ExitCode::from(EXIT_TRUNCATION)
            } else if !report.all_passed() {
                ExitCode::from(EXIT_ASSERTION)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
