fn main() {
    std::process::exit(prio_core::cli::run(std::env::args_os()));
}
