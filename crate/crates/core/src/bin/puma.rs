fn main() -> std::process::ExitCode {
    puma::cli::main_with_args(std::env::args_os())
}
