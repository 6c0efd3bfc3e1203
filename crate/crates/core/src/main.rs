fn main() -> std::process::ExitCode {
    score_forge::cli::main()
}
