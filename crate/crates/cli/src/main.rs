use clap::Parser;
use latefuse_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
        }
        Err(e) => {
            eprintln!("latefuse {}: [{}] {e}", cli.command.name(), e.category());
            std::process::exit(e.exit_code());
        }
    }
}
