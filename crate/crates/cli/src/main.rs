use clap::Parser;
use geoaqp_cli::commands::{run, Cli};
use geoaqp_cli::thread_limit;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = thread_limit().and_then(|threads| {
        if let Some(n) = threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| geoaqp_cli::CliError::Config(e.to_string()))?;
        }
        run(&cli, threads)
    });
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
