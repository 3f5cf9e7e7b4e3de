use clap::Parser;

fn main() {
    let cli = match aqmm::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { aqmm::cli::EXIT_INPUT } else { aqmm::cli::EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(aqmm::cli::run(cli));
}
