fn main() {
    std::process::exit(semipair::cli::run_from(std::env::args_os()));
}
