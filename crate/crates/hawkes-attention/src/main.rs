fn main() {
    std::process::exit(hawkes_attention::cli::main_entry());
}
