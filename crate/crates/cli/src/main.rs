fn main() {
    std::process::exit(skinnet_cli::run_command(std::env::args_os()));
}
