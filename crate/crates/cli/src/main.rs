fn main() {
    std::process::exit(vitlens_cli::run(std::env::args_os()));
}
