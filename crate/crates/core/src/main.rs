fn main() {
    std::process::exit(mese_core::cli::run(std::env::args_os()));
}
