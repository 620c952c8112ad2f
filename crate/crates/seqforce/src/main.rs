fn main() {
    std::process::exit(seqforce::cli_main());
}
