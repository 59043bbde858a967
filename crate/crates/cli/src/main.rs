use clap::Parser;

fn main() {
    let cli = vid_cli::Cli::parse();
    if let Err(e) = vid_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
