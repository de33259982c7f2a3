use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(cxlkv_cli::dispatch(std::env::args_os()) as u8)
}
