fn main() {
    std::process::exit(orderlab::cli::main_with(std::env::args_os()));
}
