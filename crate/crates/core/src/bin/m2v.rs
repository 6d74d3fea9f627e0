fn main() {
    std::process::exit(m2v_core::cli::main_with_args(std::env::args().collect()));
}
