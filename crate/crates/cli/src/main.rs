use clap::Parser;

fn main() {
    let cli = ssdet_cli::Cli::parse();
    if let Err(e) = ssdet_cli::run(cli) {
        eprintln!("ssdet: {e}");
        std::process::exit(e.exit_code());
    }
}
