fn main() {
    std::process::exit(m3d::cli::dispatch(std::env::args_os()));
}
