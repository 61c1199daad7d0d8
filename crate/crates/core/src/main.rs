fn main() {
    std::process::exit(branchforge::cli::main_with_args(std::env::args_os()));
}
