use clap::Parser;

fn main() {
    let cli = flowgate::cli::Cli::parse();
    if let Err(err) = flowgate::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(flowgate::cli::exit_code(&err));
    }
}
