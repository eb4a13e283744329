fn main() {
    std::process::exit(ida_verify::cli::run(std::env::args_os()));
}
