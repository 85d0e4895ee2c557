fn main() {
    std::process::exit(dragsplat::cli::main());
}
