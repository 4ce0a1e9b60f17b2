fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    patchseg::cli::configure_threads();
    std::process::exit(patchseg::cli::run(std::env::args_os()));
}
