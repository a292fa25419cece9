use clap::Parser;

fn main() {
    let cli = bfad_cli::Cli::parse();
    std::process::exit(bfad_cli::run(cli));
}
