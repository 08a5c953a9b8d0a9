fn main() {
    std::process::exit(sfcm_cli::run(std::env::args_os()));
}
