fn main() {
    std::process::exit(triad_cli::run(std::env::args_os()));
}
