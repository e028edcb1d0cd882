fn main() {
    std::process::exit(neuroloc::cli::main_with(std::env::args_os()));
}
