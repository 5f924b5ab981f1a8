fn main() {
    std::process::exit(gmoe_cli::run(std::env::args_os()));
}
