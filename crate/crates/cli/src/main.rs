fn main() {
    std::process::exit(prag::run(std::env::args_os()));
}
