fn main() {
    std::process::exit(lorapool::cli::main_entry());
}
