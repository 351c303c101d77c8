fn main() -> std::process::ExitCode {
    fuseguard::cli::main()
}
