fn main() {
    std::process::exit(affine_volterra::cli::run());
}
