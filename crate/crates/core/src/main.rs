fn main() {
    std::process::exit(mipsr_core::cli::run_cli(std::env::args_os()));
}
