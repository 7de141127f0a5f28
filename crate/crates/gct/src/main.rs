fn main() {
    std::process::exit(gct::cli::run());
}
