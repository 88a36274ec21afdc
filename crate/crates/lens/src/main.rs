fn main() {
    std::process::exit(reasoning_lens::cli::run(std::env::args_os()));
}
