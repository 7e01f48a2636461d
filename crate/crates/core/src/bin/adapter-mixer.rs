fn main() {
    std::process::exit(adapter_mixer::cli::run(std::env::args_os()));
}
