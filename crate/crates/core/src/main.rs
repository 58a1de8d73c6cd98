fn main() {
    std::process::exit(ssca::cli::run(std::env::args_os()));
}
