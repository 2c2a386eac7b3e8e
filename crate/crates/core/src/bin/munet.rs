fn main() -> std::process::ExitCode {
    munet_core::cli::main_with(std::env::args_os())
}
