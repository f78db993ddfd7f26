fn main() {
    std::process::exit(deltalogit::cli::run(std::env::args_os()));
}
