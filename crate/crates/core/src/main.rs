fn main() {
    let result = echofield::cli::run(std::env::args_os());
    std::process::exit(result.code);
}
