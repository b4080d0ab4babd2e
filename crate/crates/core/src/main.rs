fn main() {
    let level = std::env::var("PMF_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).init();
    std::process::exit(pmf::cli::run_command(std::env::args_os()));
}
