fn main() {
    std::process::exit(stormkit::cli::run());
}
