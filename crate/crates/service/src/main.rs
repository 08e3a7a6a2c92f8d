fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRISMLIKE_LOG", "info")).init();
    std::process::exit(prismlike_service::cli::main(std::env::args_os()));
}
