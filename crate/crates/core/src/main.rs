fn main() {
    std::process::exit(vspsr::cli::run(std::env::args_os()));
}
