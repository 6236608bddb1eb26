fn main() {
    std::process::exit(pournet::cli::main_from_args(std::env::args()));
}
