fn main() {
    std::process::exit(etlt::cli::main_with_args(std::env::args_os()));
}
