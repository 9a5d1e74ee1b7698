fn main() {
    println!("ghostwriter");
}
