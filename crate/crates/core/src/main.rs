fn main() {
    std::process::exit(homolab::cli::main_entry());
}
