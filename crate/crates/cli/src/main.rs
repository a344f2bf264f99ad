use clap::Parser;

fn main() {
    let cli = stepnft_cli::Cli::parse();
    let code = match stepnft_cli::run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            stepnft_cli::exit_code(&err)
        }
    };
    std::process::exit(code);
}
