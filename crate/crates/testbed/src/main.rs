fn main() {
    std::process::exit(fogbed::cli::main_with(std::env::args_os()));
}
