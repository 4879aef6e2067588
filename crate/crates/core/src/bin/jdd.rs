fn main() {
    std::process::exit(jdd::cli::main_with_args(std::env::args_os()));
}
