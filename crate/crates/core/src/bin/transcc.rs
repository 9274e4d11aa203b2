fn main() {
    std::process::exit(transcc::cli::main_with_args(std::env::args_os()));
}
