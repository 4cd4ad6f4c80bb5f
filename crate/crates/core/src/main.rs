fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(ubpa::cli::run_command(&argv));
}
