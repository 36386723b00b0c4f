fn main() {
    let code = hgnet::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
