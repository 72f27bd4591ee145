fn main() {
    std::process::exit(incdet::cli::run(std::env::args_os()));
}
