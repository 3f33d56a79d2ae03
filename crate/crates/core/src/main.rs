fn main() {
    std::process::exit(smclab::cli::run(std::env::args_os()));
}
