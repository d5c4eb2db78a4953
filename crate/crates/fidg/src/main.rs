use clap::Parser;

fn main() {
    let cli = fidg::cli::Cli::parse();
    if let Err(err) = fidg::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.code());
    }
}
