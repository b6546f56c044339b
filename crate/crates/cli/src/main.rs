use std::process::ExitCode;

use clap::Parser;
use esplit_cli::{Cli, CliError, Outcome};

fn report(outcome: &Outcome) {
    let line = match outcome {
        Outcome::Done => return,
        Outcome::TeacherAccuracy(a) => format!("teacher accuracy {a:.4}"),
        Outcome::Head(h) => format!("{:?} head accuracy {:.4} (chance {:.2})", h.task, h.accuracy, h.chance),
        Outcome::Rd(points) => points
            .iter()
            .map(|p| format!("{:<16} {:>9.2} B/sample  {:.4} bpp  acc {:.4}", p.run_id, p.bytes_per_sample, p.bits_per_pixel, p.accuracy))
            .collect::<Vec<_>>()
            .join("\n"),
        Outcome::Split(s) => serde_json::to_string_pretty(s).expect("summary serializes"),
        Outcome::Scenarios(rows) => rows
            .iter()
            .map(|r| format!("{:<6} {:<14} {:>9.2} B  total {:.6} s  acc {:.4}", r.scenario.name(), r.run_id, r.mean_payload_bytes, r.mean_total_s, r.accuracy))
            .collect::<Vec<_>>()
            .join("\n"),
        Outcome::Sweep(s) => format!(
            "teacher {:.4}; two-stage {}",
            s.teacher_accuracy,
            s.two_stage.iter().map(|p| format!("[{:.1} B, {:.4}]", p.bytes_per_sample, p.accuracy)).collect::<Vec<_>>().join(" ")
        ),
        Outcome::Rerun { outputs } => format!("rerun reproduced {outputs} outputs"),
    };
    println!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("error[{}]: {err}", err.category());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match cli.execute() {
        Ok((outcome, _)) => {
            report(&outcome);
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
