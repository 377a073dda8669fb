use clap::Parser;

fn main() {
    let cli = v4d::cli::Cli::parse();
    if let Err(e) = v4d::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
