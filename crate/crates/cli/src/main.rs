use clap::Parser;

fn main() {
    let cli = crn_cli::Cli::parse();
    if let Err(f) = crn_cli::run(cli) {
        eprintln!("error: {}", f.message);
        std::process::exit(f.code);
    }
}
