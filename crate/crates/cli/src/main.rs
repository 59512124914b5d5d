use clap::Parser;

fn main() {
    let cli = clsnav::Cli::parse();
    if let Err(e) = clsnav::run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
