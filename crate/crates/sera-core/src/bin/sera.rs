fn main() {
    std::process::exit(sera_core::cli::run_cli(std::env::args_os()));
}
