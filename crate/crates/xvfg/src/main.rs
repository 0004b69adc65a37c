fn main() {
    std::process::exit(xvfg::cli::run());
}
