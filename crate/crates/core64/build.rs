fn main() {
    println!("cargo::rustc-cfg=jh_real64");
    println!("cargo::rerun-if-changed=build.rs");
}
