use clap::Parser;
use fedskel_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("fedskel: {e}");
        std::process::exit(e.exit_code());
    }
}
