fn main() {
    std::process::exit(windsr::cli::main_with_args(std::env::args_os()));
}
