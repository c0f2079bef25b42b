use clap::Parser;

fn main() {
    let cli = dpq::cli_io::Cli::parse();
    if let Err(e) = dpq::cli_io::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
