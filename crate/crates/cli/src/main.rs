fn main() {
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    std::process::exit(simrel_cli::run_args(std::env::args_os(), &mut out, &mut err));
}
