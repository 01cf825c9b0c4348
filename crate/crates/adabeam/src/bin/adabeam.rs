fn main() {
    std::process::exit(adabeam::cli::run(std::env::args_os()));
}
