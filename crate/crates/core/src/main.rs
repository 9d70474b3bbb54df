use clap::Parser;

use maa::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(value) = std::env::var("MAA_NUM_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: cannot size thread pool: {e}");
                    std::process::exit(1);
                }
            }
            _ => {
                eprintln!("error: MAA_NUM_THREADS must be a positive integer, got `{value}`");
                std::process::exit(2);
            }
        }
    }
    std::process::exit(run(Cli::parse()));
}
