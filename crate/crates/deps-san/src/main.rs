fn main() {
    std::process::exit(deps_san::cli::run() as i32);
}
