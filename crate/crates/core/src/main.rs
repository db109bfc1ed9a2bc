fn main() {
    std::process::exit(rfsearch::cli::run(std::env::args_os()));
}
