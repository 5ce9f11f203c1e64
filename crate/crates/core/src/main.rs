fn main() -> std::process::ExitCode {
    ilmarl::cli::main()
}
