fn main() {
    std::process::exit(evpretrain::cli::run(std::env::args_os()));
}
