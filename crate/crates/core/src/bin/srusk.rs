use clap::Parser;

fn main() {
    let cli = srusk_core::cli::Cli::parse();
    std::process::exit(srusk_core::cli::run(cli));
}
