fn main() {
    std::process::exit(tetraloss_cli::run(std::env::args_os()));
}
