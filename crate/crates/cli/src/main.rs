use clap::Parser;

fn main() -> anyhow::Result<()> {
    evc_cli::execute(evc_cli::Cli::parse())
}
