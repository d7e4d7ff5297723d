fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed = std::env::var("XVA_SEED").ok();
    let stdout = std::io::stdout();
    let code = xva_cli::run(&args, seed.as_deref(), &mut stdout.lock());
    std::process::exit(code);
}
