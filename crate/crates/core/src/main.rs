fn main() {
    std::process::exit(stereomamba::cli::main_with_args(std::env::args_os()));
}
