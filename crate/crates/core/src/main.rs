fn main() {
    std::process::exit(carcal::cli::run(std::env::args_os()));
}
