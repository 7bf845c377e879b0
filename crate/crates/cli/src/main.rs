fn main() {
    std::process::exit(ssa_cli::run(std::env::args().collect()));
}
