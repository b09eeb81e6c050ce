fn main() {
    std::process::exit(pdegen_core::cli::main_with_args(std::env::args_os()));
}
