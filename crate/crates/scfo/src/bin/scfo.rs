fn main() {
    std::process::exit(scfo::cli::run_cli(std::env::args_os()));
}
