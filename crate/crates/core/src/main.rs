fn main() {
    std::process::exit(gatelab::cli::main_with_args(std::env::args_os()));
}
