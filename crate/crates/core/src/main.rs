fn main() {
    std::process::exit(frs_audit::cli::main());
}
