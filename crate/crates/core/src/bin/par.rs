fn main() {
    std::process::exit(par_core::cli::run(std::env::args_os()));
}
