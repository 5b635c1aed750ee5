fn main() {
    std::process::exit(tgl_core::cli::run_cli(std::env::args_os()));
}
