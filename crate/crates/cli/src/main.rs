fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(stabfi_cli::run(&argv));
}
