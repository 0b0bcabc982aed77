use std::io;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::Parser;
use pocketlm_cli::chat::GENERATING;
use pocketlm_cli::{execute, Cli, Command, EXIT_OK, EXIT_USAGE};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK } as u8);
        }
    };
    let level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cancel = Arc::new(AtomicBool::new(false));
    if matches!(cli.command, Command::Chat(_) | Command::Run(_)) {
        let flag = cancel.clone();
        // the first Ctrl+C interjects; a second one quits
        let installed = ctrlc::set_handler(move || {
            if flag.swap(true, Ordering::SeqCst) || !GENERATING.load(Ordering::SeqCst) {
                println!();
                std::process::exit(EXIT_OK);
            }
        });
        if let Err(e) = installed {
            log::warn!("cannot install interrupt handler: {e}");
        }
    }

    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut out = io::stdout();
    match execute(cli, &mut input, &mut out, &cancel) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
