fn main() {
    std::process::exit(varbilstm::run());
}
