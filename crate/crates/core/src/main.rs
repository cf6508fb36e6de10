fn main() {
    std::process::exit(translab::cli::run(std::env::args_os()));
}
