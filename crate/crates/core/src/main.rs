use pointsplat::cli;

fn main() {
    std::process::exit(cli::main());
}
