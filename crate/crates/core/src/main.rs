fn main() {
    std::process::exit(peseg::cli::run());
}
