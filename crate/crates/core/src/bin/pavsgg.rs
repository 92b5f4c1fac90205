fn main() {
    std::process::exit(pavsgg::cli::run(std::env::args_os()));
}
