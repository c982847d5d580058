fn main() {
    std::process::exit(stitchkit_cli::run(std::env::args_os()));
}
