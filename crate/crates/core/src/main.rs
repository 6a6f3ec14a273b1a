fn main() {
    std::process::exit(ramit::cli::run(std::env::args_os()));
}
