fn main() {
    std::process::exit(dilemma_core::cli::main());
}
