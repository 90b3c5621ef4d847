fn main() {
    std::process::exit(svdcache_cli::main_from_args(std::env::args_os()));
}
