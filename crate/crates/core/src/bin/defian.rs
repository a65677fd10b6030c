fn main() {
    std::process::exit(defian::cli::run(std::env::args_os()));
}
