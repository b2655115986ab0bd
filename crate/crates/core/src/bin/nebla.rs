fn main() {
    std::process::exit(nebla_core::cli::main_with_args(std::env::args().collect()));
}
