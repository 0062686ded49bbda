fn main() {
    std::process::exit(bootpig::cli_main());
}
