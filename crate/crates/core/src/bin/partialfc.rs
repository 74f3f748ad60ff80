fn main() {
    std::process::exit(partialfc::cli::run(std::env::args_os()));
}
