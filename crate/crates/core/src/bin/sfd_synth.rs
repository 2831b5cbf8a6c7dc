use clap::error::ErrorKind;
use clap::Parser;

use sfdfusion::cli::{run_synth, SynthCli};

fn main() {
    let cli = match SynthCli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run_synth(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
