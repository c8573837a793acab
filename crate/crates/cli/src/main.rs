use std::process::exit;

use clap::Parser;

use spooftrace_cli::commands::{run, Cli};

/// Exit codes: 0 success, 1 usage error, 2 runtime failure.
fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help and --version surface as clap "errors" but are not failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            exit(code);
        }
    };
    if let Err(err) = run(cli) {
        // Ignore EPIPE on stderr so a closed pipe cannot mask the exit code.
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), "spooftrace: {err}");
        exit(2);
    }
}
