fn main() {
    std::process::exit(runet_core::cli::run_from_args(std::env::args_os()));
}
