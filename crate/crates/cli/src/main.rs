fn main() {
    std::process::exit(cspc_cli::main_with(std::env::args_os()));
}
