fn main() {
    std::process::exit(pointdico::harness::cli::run(std::env::args_os()));
}
