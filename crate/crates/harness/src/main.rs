fn main() {
    std::process::exit(udig_harness::cli::run(std::env::args_os()));
}
