fn main() {
    std::process::exit(cmsr_cli::run(std::env::args_os()));
}
