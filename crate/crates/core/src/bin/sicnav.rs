fn main() {
    std::process::exit(sicnav::cli::main_with_args(std::env::args_os()));
}
