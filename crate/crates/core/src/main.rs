fn main() {
    std::process::exit(qumab::cli::main_with_args(std::env::args_os()));
}
