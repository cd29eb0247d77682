fn main() {
    std::process::exit(stochbt::cli::main_with_args(std::env::args_os()));
}
