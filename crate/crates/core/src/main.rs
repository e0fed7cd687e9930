fn main() {
    env_logger::init();
    std::process::exit(qdsum::cli::run(std::env::args_os()));
}
