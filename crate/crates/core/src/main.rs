fn main() {
    std::process::exit(deco::cli::main_with_args(std::env::args_os()));
}
