fn main() -> std::process::ExitCode {
    ds2net::cli::main()
}
