fn main() {
    std::process::exit(mdnet::harness::cli_main(std::env::args_os()));
}
