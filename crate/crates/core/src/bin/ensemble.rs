fn main() {
    std::process::exit(adaptive_ensemble::cli::main_with_args(std::env::args_os()));
}
