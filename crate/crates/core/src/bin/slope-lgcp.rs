fn main() {
    std::process::exit(slope_lgcp::cli::main_with_args(std::env::args_os().collect()));
}
