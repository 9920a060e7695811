fn main() {
    std::process::exit(t1d_cli::run(std::env::args_os()));
}
