use std::process::ExitCode;

use avgbound_cli::{configure_threads, error_json, run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = anyhow::anyhow!("{}", e.to_string().trim_end());
            let mut v = error_json(None, &err);
            v["error"]["kind"] = "usage".into();
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_json(Some(cli.command.name()), &err));
            ExitCode::FAILURE
        }
    }
}
