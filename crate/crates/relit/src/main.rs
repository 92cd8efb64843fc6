fn main() {
    std::process::exit(relit::cli::cli_main(std::env::args()));
}
