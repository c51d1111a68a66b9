fn main() {
    std::process::exit(useg::cli::run(std::env::args_os()));
}
