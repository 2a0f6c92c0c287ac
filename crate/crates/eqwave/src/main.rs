use clap::Parser;

fn main() {
    let cli = eqwave::cli::Cli::parse();
    std::process::exit(eqwave::cli::main_with(cli));
}
