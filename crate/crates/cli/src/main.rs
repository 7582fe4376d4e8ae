fn main() {
    std::process::exit(volt_cli::run(std::env::args_os()));
}
