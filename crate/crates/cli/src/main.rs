fn main() {
    std::process::exit(macd_cli::run(std::env::args_os()));
}
