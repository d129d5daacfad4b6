fn main() {
    eqv::cli::init_logging();
    std::process::exit(eqv::cli::run(std::env::args_os()));
}
