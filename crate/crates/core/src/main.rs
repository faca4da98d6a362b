fn main() {
    std::process::exit(mixspline::cli::run(std::env::args_os()));
}
