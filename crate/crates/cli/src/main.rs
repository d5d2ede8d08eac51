fn main() {
    std::process::exit(igam::cli::main());
}
