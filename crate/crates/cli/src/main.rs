fn main() {
    std::process::exit(trunclab_cli::main_with_args(std::env::args_os()));
}
