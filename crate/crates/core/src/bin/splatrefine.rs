fn main() {
    std::process::exit(splatrefine::cli::run(std::env::args_os()));
}
