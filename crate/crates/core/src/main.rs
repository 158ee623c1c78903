fn main() {
    std::process::exit(cmflq::cli::run_from_env());
}
