fn main() {
    std::process::exit(awracle::cli::main_with_args(std::env::args_os()));
}
