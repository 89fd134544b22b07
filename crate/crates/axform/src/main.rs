fn main() {
    std::process::exit(axform::cli::main_with_args(std::env::args_os()));
}
