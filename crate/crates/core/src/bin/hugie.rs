fn main() {
    std::process::exit(hugnlp::hugie::run_hugie_cli(std::env::args_os()));
}
