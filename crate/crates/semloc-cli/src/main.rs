fn main() {
    println!("semloc");
}
