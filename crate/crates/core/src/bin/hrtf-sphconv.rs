fn main() {
    std::process::exit(hrtf_sphconv::cli::main_with_args(std::env::args_os()));
}
