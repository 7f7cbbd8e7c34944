use clap::Parser;
use jointep::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let result = run(cli);
    match &result {
        Ok(text) => print!("{text}"),
        Err(e) => eprintln!("error: {e}"),
    }
    std::process::exit(exit_code(&result));
}
