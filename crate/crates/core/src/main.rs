fn main() {
    std::process::exit(padic_limits::cli::run(std::env::args_os()));
}
