use std::env;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();

    let mut config = cbindgen::Config::default();
    config.cpp_compat = true;
    config.documentation = true;
    // Bare `Ok`/`Io` constants would pollute the global C namespace.
    config.enumeration.prefix_with_name = true;

    cbindgen::Builder::new()
        .with_config(config)
        .with_crate(&crate_dir)
        .with_language(cbindgen::Language::C)
        .with_include_guard("IMFACE_H")
        .generate()
        .expect("unable to generate the C header")
        .write_to_file(format!("{crate_dir}/include/imface.h"));
}
