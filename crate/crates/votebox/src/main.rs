fn main() -> anyhow::Result<()> {
    votebox::cli::run()
}
