fn main() {
    std::process::exit(closedloop_cli::dispatch(std::env::args().skip(1)));
}
