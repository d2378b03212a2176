fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(aeroservo_cli::run_command(&args));
}
