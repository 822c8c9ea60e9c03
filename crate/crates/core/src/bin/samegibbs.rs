use clap::Parser;

use samegibbs::cli::{dispatch, exit_code, Cli};

fn main() {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(report) => println!("{report}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
