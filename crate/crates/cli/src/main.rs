use gram_cli::app;
use gram_cli::error::CliError;

fn main() {
    match app::run(std::env::args_os()) {
        Ok(summary) => println!("{summary}"),
        Err(CliError::Help(text)) => print!("{text}"),
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}
