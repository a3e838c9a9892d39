fn main() {
    std::process::exit(conmix_cli::run(std::env::args_os()));
}
