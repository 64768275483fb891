fn main() {
    std::process::exit(lqmkv::cli::main_with(std::env::args_os()));
}
