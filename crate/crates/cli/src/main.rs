fn main() {
    std::process::exit(sciml_cli::run(std::env::args_os()));
}
