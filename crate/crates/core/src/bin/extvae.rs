fn main() {
    std::process::exit(extvae::cli::run(std::env::args_os()));
}
