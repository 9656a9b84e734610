fn main() {
    std::process::exit(cft_cli::run(std::env::args_os()));
}
