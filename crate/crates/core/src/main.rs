fn main() {
    std::process::exit(branchlab::cli::main_with_args(std::env::args_os()));
}
