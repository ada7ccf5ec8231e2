fn main() {
    println!("regaze");
}
