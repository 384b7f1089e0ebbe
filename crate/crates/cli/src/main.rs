use clap::Parser;
use wspace_cli::args::{split_overrides, Cli};
use wspace_cli::commands::{exit_code, run, EXIT_USAGE};
use wspace_core::config::Config;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (argv, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(EXIT_USAGE);
        }
    };
    let cli = Cli::try_parse_from(argv).unwrap_or_else(|e| e.exit());
    let result = Config::resolve(cli.config.as_deref())
        .and_then(|c| c.with_overrides(&overrides))
        .map(|mut c| {
            if let Some(w) = cli.workdir {
                c.workdir = w;
            }
            c
        })
        .map_err(anyhow::Error::from)
        .and_then(|cfg| run(cli.command, &cfg));
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
