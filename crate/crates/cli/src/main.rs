//! `gpccopf` command-line entry point.

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(gpccopf::main_with(&args));
}
