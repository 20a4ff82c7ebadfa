fn main() {
    std::process::exit(prcalc_cli::run(std::env::args_os()));
}
