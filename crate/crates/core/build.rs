use std::process::Command;

fn main() {
    let describe = Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let version = env!("CARGO_PKG_VERSION");
    let value = match describe {
        Some(d) => format!("v{version}-g{d}"),
        None => format!("v{version}"),
    };
    println!("cargo:rustc-env=SYNTHVISION_VERSION={value}");
    println!("cargo:rerun-if-changed=build.rs");
}
