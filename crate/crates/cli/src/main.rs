fn main() {
    std::process::exit(iassl_cli::main_with_args(std::env::args_os()));
}
