fn main() {
    std::process::exit(hgprompt::cli::run(std::env::args_os()));
}
