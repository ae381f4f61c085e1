fn main() -> std::process::ExitCode {
    wsshm::cli::main()
}
