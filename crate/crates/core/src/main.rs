fn main() {
    std::process::exit(matryoshka2d::cli::main());
}
