fn main() {
    std::process::exit(extremals::cli::run());
}
