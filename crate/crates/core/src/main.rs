fn main() {
    std::process::exit(intraclass::cli::run(std::env::args_os()));
}
