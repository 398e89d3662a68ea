fn main() {
    std::process::exit(lddm::cli::main_with_args(std::env::args_os()));
}
