fn main() {
    std::process::exit(jsqd::cli::run(std::env::args_os()));
}
