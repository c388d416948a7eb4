fn main() {
    std::process::exit(distillab::harness::cli(std::env::args_os()));
}
