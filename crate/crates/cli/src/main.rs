fn main() {
    std::process::exit(stoflow_cli::run(std::env::args_os()));
}
