fn main() {
    std::process::exit(sarcgen::run_cli());
}
