fn main() {
    if let Err(e) = nextlocmoe::cli::run() {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
