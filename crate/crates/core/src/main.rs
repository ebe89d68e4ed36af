fn main() {
    std::process::exit(egmf::cli::cli_main(std::env::args_os()));
}
