use clap::{Parser, Subcommand};

mod cmds;
mod out;

/// Synthesize FaaS workload power traces and profile per-invocation
/// energy footprints.
#[derive(Parser)]
#[command(name = "faasmeter", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload and its power traces from a scenario file
    Simulate(cmds::SimulateArgs),
    /// Estimate (and optionally correct) meter clock skew
    Signal(cmds::SignalArgs),
    /// Disaggregate recorded traces into per-function energy footprints
    Profile(cmds::ProfileArgs),
    /// Score estimators against a scenario's ground truth
    Validate(cmds::ValidateArgs),
    /// Replay a scenario under a power cap
    Cap(cmds::CapArgs),
    /// Summarize profiling or validation outputs into report tables
    Report(cmds::ReportArgs),
}

/// Render the error chain, skipping causes a wrapper already displayed.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let s = cause.to_string();
        if out.is_empty() {
            out = s;
        } else if !out.contains(&s) {
            out.push_str(": ");
            out.push_str(&s);
        }
    }
    out
}

/// 0 ok, 1 usage, 2 validation, 3 I/O.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<faasmeter_core::Error>() {
            return match core {
                faasmeter_core::Error::Io { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => cmds::simulate_cmd(args),
        Command::Signal(args) => cmds::signal_cmd(args),
        Command::Profile(args) => cmds::profile_cmd(args),
        Command::Validate(args) => cmds::validate_cmd(args),
        Command::Cap(args) => cmds::cap_cmd(args),
        Command::Report(args) => cmds::report_cmd(args),
    };
    if let Err(err) = result {
        eprintln!("error: {}", render(&err));
        std::process::exit(exit_code(&err));
    }
}
