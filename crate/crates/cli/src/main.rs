fn main() {
    std::process::exit(rpose_cli::run(std::env::args_os()));
}
