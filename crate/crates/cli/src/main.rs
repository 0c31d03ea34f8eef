fn main() {
    std::process::exit(vade_cli::main_with_args(std::env::args()));
}
