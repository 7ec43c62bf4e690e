fn main() {
    std::process::exit(mkgauss_sca::cli::run(std::env::args_os()));
}
