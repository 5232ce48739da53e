//! Regenerate the bundled 20-frame replay fixture:
//!
//!     cargo run -p signvox-core --example gen_replay_fixture -- crates/core/tests/fixtures/replay20

use std::path::PathBuf;

use signvox::pipeline::synthetic;

fn main() -> std::io::Result<()> {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("replay20"));
    let frames = synthetic::tensor_frames(20, 2021);
    synthetic::write_frames(&frames, &dir)?;
    println!("wrote {} frames to {}", frames.len(), dir.display());
    Ok(())
}
