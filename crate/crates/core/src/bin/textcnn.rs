fn main() {
    std::process::exit(textcnn::cli::main_with_args(std::env::args_os()));
}
