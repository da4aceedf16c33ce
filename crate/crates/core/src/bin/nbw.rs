use clap::Parser;

fn main() {
    std::process::exit(nbw::cli::run(nbw::cli::Cli::parse()));
}
