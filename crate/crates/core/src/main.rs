fn main() -> std::process::ExitCode {
    drsafe::cli::main()
}
