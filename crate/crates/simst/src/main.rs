use clap::Parser;
use simst::cli::{run, Cli};
use simst::error::exit_code;

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
