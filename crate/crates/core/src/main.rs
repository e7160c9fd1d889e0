fn main() {
    std::process::exit(scora::cli::run(std::env::args_os()));
}
