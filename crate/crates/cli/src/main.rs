fn main() {
    std::process::exit(ghostserve_cli::run(std::env::args_os()));
}
