fn main() {
    std::process::exit(lightsql::cli::run(std::env::args_os()));
}
