//! Prints the built-in configuration as TOML.

fn main() {
    print!("{}", pacda::config::Config::default().to_toml().expect("default config serializes"));
}
