fn main() {
    std::process::exit(coplanner::cli::main_with_args(std::env::args_os()));
}
