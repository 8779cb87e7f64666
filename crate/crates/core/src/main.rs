fn main() {
    std::process::exit(cin_core::cli::run(std::env::args_os()));
}
