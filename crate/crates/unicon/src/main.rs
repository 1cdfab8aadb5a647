use clap::Parser;

fn main() {
    let cli = unicon::cli::Cli::parse();
    if let Err(e) = unicon::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
