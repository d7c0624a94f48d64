use std::process::exit;

fn main() {
    exit(imontage::cli::run(std::env::args_os()));
}
