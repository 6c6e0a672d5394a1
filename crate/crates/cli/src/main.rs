use clap::Parser;
use mecor_cli::{run, Cli, EXIT_VALIDATION};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
