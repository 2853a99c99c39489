fn main() {
    std::process::exit(dcp_nas::cli::main());
}
