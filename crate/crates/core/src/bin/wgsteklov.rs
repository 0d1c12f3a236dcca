fn main() {
    std::process::exit(wg_steklov::harness::cli::cli_main(std::env::args_os()));
}
