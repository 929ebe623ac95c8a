fn main() {
    std::process::exit(tripletspace::cli::run(std::env::args_os()));
}
