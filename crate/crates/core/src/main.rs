fn main() {
    std::process::exit(synthex::cli::run(std::env::args_os()));
}
