fn main() {
    std::process::exit(rtpca::cli::main(std::env::args_os()));
}
