fn main() {
    std::process::exit(disorder_dynamics::cli::run());
}
