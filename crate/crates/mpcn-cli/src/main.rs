mod args;
mod commands;
mod config;
mod plot;
mod rundir;

use clap::Parser;

fn main() {
    let cli = args::Cli::parse();
    let result = match &cli.command {
        args::Command::GenData(a) => commands::gen_data(a),
        args::Command::Train(a) => commands::train(a),
        args::Command::Eval(a) => commands::eval(a),
        args::Command::PlotShots(a) => commands::plot_shots(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
