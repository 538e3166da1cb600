fn main() {
    std::process::exit(pomp_core::cli::run(std::env::args_os()));
}
