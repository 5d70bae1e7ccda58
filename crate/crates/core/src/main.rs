fn main() {
    std::process::exit(rnp::cli::run(std::env::args_os()));
}
