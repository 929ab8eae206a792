fn main() {
    std::process::exit(privsynth::cli::main_with(std::env::args_os()));
}
