fn main() {
    std::process::exit(anosov_lab::lab::cli_main());
}
