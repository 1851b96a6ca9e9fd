fn main() {
    std::process::exit(flexcausal::cli::run(std::env::args_os()));
}
