fn main() {
    std::process::exit(smedseg::cli::run());
}
