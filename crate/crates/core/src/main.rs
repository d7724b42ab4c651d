fn main() {
    std::process::exit(panelforecast::cli::run());
}
