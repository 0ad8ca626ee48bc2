fn main() {
    std::process::exit(coxiv::cli::run(std::env::args_os()));
}
