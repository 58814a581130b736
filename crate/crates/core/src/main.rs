fn main() {
    std::process::exit(disparity::cli::main_with_args(std::env::args_os()));
}
