fn main() {
    std::process::exit(cotok::cli::run(std::env::args_os()));
}
