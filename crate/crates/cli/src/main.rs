fn main() {
    std::process::exit(dualstress_cli::run(std::env::args_os().collect()));
}
