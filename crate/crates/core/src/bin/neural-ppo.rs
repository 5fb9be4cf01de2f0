use std::process::ExitCode;

fn main() -> ExitCode {
    match neural_ppo::cli::main_with_args(std::env::args_os()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            if let Some(clap_err) = err.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return ExitCode::from(clap_err.exit_code() as u8);
            }
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
