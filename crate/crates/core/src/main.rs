fn main() {
    std::process::exit(score_distill::cli::run(std::env::args_os()));
}
