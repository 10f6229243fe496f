use clap::Parser;
use semantic_fusion::cli;

fn main() {
    let args = cli::Cli::parse();
    if let Err(e) = cli::run(args) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}
