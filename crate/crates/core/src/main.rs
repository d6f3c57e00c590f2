fn main() {
    maxsr::configure_thread_pool();
    std::process::exit(maxsr::cli::run());
}
