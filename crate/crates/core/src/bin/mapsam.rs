fn main() {
    std::process::exit(mapsam::cli::main());
}
