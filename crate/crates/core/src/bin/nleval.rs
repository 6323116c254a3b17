fn main() {
    std::process::exit(nleval::cli::run(std::env::args_os()));
}
