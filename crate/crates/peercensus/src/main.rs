use clap::Parser;

fn main() {
    let cli = peercensus::cli::Cli::parse();
    std::process::exit(peercensus::cli::run(cli));
}
