fn main() {
    std::process::exit(rdcm::cli::main());
}
