fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(vthinker_core::executor::stub_worker::main_with_args(&args));
}
