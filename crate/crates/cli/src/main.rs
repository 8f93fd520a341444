fn main() {
    std::process::exit(red_cli::run(std::env::args_os()));
}
