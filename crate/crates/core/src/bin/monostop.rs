use clap::Parser;
use monotone_stopping::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => println!("{} written to {}", cli.command.name(), dir.display()),
        Err(e) => {
            eprintln!("monostop {}: {e}", cli.command.name());
            std::process::exit(exit_code(&e));
        }
    }
}
