fn main() {
    std::process::exit(optshift_cli::run(std::env::args_os()));
}
