use clap::Parser;
use vitrc::cli::{run, Cli, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VITRC_LOG", "info"))
        .format_timestamp(None)
        .init();
    let code = match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    };
    std::process::exit(code);
}
