fn main() {
    std::process::exit(adasparse::cli::main_with_args(std::env::args_os()));
}
