use std::process::ExitCode;

use clap::Parser;
use thermoray_cli::report::Relation;
use thermoray_cli::{run, Args};

fn relation(r: Relation) -> &'static str {
    match r {
        Relation::AtMost => "<=",
        Relation::AtLeast => ">=",
        Relation::Above => ">",
        Relation::Equal => "==",
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&args) {
        Ok(outcome) => {
            for c in &outcome.report.checks {
                let status = if c.pass { "PASS" } else { "FAIL" };
                println!("{status}  {}  {:e} {} {:e}", c.name, c.value, relation(c.relation), c.threshold);
            }
            if let Some(fields) = outcome.report.result.as_object() {
                for (k, v) in fields.iter().filter(|(_, v)| v.is_number() || v.is_boolean()) {
                    println!("{k}: {v}");
                }
            }
            println!("report: {}", outcome.path.display());
            println!("{}: {}", outcome.report.command, if outcome.report.pass { "pass" } else { "FAIL" });
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("thermoray: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
