fn main() {
    std::process::exit(robotic_clip_cli::run(std::env::args_os()));
}
