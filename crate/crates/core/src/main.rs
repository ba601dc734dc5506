fn main() {
    std::process::exit(actsz::cli::main_with(std::env::args_os()));
}
