use std::io::Write;

fn main() {
    let mut stdout = std::io::stdout().lock();
    let code = nommer::cli::run(std::env::args_os(), &mut stdout, &mut std::io::stderr());
    let _ = stdout.flush();
    std::process::exit(code);
}
