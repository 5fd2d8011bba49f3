use clap::Parser;

fn main() {
    let cli = evtrack_cli::Cli::parse();
    if let Err(e) = evtrack_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
