use clap::Parser;

use avsep::cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = cli.execute() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
