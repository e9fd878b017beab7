fn main() {
    std::process::exit(promptdepth::cli::dispatch(std::env::args().skip(1)));
}
