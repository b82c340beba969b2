fn main() {
    println!("slotvid");
}
