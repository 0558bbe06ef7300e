fn main() {
    std::process::exit(coala::cli::run(std::env::args_os()));
}
