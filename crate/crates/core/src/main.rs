fn main() {
    std::process::exit(modalnet::cli::main(std::env::args_os()));
}
