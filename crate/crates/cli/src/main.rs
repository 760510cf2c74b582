fn main() {
    std::process::exit(rabiflow_cli::run(std::env::args_os()));
}
