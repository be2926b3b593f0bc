fn main() {
    std::process::exit(sirem::cli::run(std::env::args_os()));
}
