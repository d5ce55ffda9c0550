fn main() {
    std::process::exit(cmrm::cli::run(std::env::args_os()));
}
