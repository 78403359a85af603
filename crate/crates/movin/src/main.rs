fn main() {
    std::process::exit(movin::cli::run(std::env::args_os()));
}
