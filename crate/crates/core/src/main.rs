fn main() {
    std::process::exit(mtlue_core::cli::run(std::env::args_os()));
}
