fn main() {
    std::process::exit(hprobe::cli::main_with_args(std::env::args_os()));
}
