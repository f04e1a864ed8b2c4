fn main() {
    std::process::exit(flex::cli::run(std::env::args_os()));
}
