fn main() {
    std::process::exit(scorelab::cli::main_entry());
}
