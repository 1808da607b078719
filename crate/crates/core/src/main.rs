fn main() {
    std::process::exit(tinychirp::cli::run(std::env::args_os()));
}
