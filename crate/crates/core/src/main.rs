fn main() {
    std::process::exit(kvlab::harness::cli::main_with(std::env::args_os()));
}
