fn main() {
    std::process::exit(mft::cli::run_from(std::env::args_os()));
}
