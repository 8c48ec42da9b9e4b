fn main() {
    std::process::exit(demf::cli::main_entry());
}
