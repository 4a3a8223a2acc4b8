//! Locations shared by the acceptance suite.

use std::path::PathBuf;

/// The bundled desk-scale scenario.
pub fn desk_config() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/configs/desk.toml"))
}

/// The `pfeddsh` binary in the target directory this test executable was
/// built into. Cargo builds it alongside the workspace tests; run
/// `cargo build -p pfeddsh` first when testing this package alone.
pub fn pfeddsh_bin() -> PathBuf {
    let exe = std::env::current_exe().expect("test executable path");
    // target/<profile>/deps/<test> -> target/<profile>/pfeddsh
    let profile_dir = exe.parent().and_then(|deps| deps.parent()).expect("target layout");
    let bin = profile_dir.join(format!("pfeddsh{}", std::env::consts::EXE_SUFFIX));
    assert!(
        bin.is_file(),
        "{} not found; run `cargo build -p pfeddsh` first",
        bin.display()
    );
    bin
}
