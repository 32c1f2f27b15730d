fn main() {
    std::process::exit(entropy_splat::cli::main_with_args(std::env::args_os()));
}
