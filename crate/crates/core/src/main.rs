fn main() {
    std::process::exit(homonet::cli::main(std::env::args_os()));
}
