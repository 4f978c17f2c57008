fn main() {
    std::process::exit(iohrt_cli::run(std::env::args_os()));
}
