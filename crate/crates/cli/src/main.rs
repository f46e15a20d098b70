fn main() {
    std::process::exit(spikebev_cli::run_args(std::env::args_os()));
}
