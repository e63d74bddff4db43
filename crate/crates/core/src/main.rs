fn main() {
    std::process::exit(dropclass::cli::run(std::env::args_os()));
}
