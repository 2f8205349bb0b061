use clap::Parser;
use kamtori_cli::{dispatch, init_threads, Cli, EXIT_INPUT, EXIT_OK};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are input errors; exit 2 is reserved for resonant halts
            std::process::exit(if e.use_stderr() { EXIT_INPUT } else { EXIT_OK });
        }
    };
    init_threads();
    std::process::exit(dispatch(&cli));
}
