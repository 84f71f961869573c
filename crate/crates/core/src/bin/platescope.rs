fn main() {
    std::process::exit(platescope::cli::run(std::env::args_os()));
}
