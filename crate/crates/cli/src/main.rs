use clap::Parser;
use ddlearn_cli::Cli;

fn main() {
    if let Err(err) = ddlearn_cli::run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
