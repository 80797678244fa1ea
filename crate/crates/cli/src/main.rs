use clap::error::ErrorKind;
use clap::Parser;
use mcgan_cli::commands::{execute, Cli};
use mcgan_cli::error::CliError;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let subcommand = std::env::args().nth(1).unwrap_or_default();
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json(&subcommand));
            std::process::exit(err.exit_code());
        }
    };
    let name = cli.command.name();
    if let Err(e) = execute(cli) {
        eprintln!("{}", e.to_json(name));
        std::process::exit(e.exit_code());
    }
}
