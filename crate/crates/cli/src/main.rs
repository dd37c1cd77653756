use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match xmrr_cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(ce) if !ce.use_stderr() => {
                let _ = ce.print();
                ExitCode::SUCCESS
            }
            _ => {
                eprintln!("error: {}", xmrr_cli::describe(&e));
                ExitCode::FAILURE
            }
        },
    }
}
