fn main() {
    std::process::exit(ddl_core::cli::run(std::env::args_os()));
}
