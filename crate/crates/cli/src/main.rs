fn main() {
    std::process::exit(covloc_cli::run(std::env::args_os()));
}
