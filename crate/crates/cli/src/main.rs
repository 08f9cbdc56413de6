fn main() {
    std::process::exit(robust_rrl_cli::cli_main(std::env::args_os()));
}
