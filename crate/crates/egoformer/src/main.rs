fn main() {
    std::process::exit(egoformer::cli::run());
}
