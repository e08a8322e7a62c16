fn main() {
    std::process::exit(sewer_mpc::cli::main());
}
