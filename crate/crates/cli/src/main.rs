fn main() {
    std::process::exit(fatseg_cli::run(std::env::args_os()));
}
