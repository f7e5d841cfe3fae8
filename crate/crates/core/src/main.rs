fn main() {
    std::process::exit(nowcast_core::cli::parse_and_dispatch(std::env::args_os()));
}
