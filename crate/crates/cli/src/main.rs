use clap::Parser;
use contiplan_cli::{exit, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are configuration errors; --help and --version are not
            std::process::exit(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    std::process::exit(run(&cli));
}
