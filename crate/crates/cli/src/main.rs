fn main() {
    std::process::exit(editdiff_cli::run(std::env::args_os()));
}
