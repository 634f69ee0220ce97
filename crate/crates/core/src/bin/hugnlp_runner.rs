fn main() {
    std::process::exit(hugnlp::training::run_cli(std::env::args_os()));
}
