fn main() -> std::process::ExitCode {
    clipmi::cli::main_from(std::env::args_os())
}
