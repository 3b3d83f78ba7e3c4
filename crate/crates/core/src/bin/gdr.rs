fn main() {
    std::process::exit(gdr::cli::run(std::env::args_os()));
}
