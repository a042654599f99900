use clap::Parser;

fn main() {
    if let Err(e) = cmm_mix::cli::run(cmm_mix::cli::Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
