fn main() {
    println!("bevfuse");
}
