use clap::Parser;

fn main() {
    let cli = sdnet::cli::Cli::parse();
    if let Err(e) = sdnet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
