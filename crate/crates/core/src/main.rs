fn main() {
    env_logger::init();
    std::process::exit(fracctl::cli::main_with(std::env::args_os()));
}
