use std::fs;
use std::path::PathBuf;

use signvox::pipeline::synthetic;

#[test]
fn bundled_fixture_matches_generator() {
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay20");
    let fresh = tempfile::tempdir().unwrap();
    synthetic::write_frames(&synthetic::tensor_frames(20, 2021), fresh.path()).unwrap();

    let mut names: Vec<_> = fs::read_dir(&fixture)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 20);
    for name in names {
        let bundled = fs::read(fixture.join(&name)).unwrap();
        let regenerated = fs::read(fresh.path().join(&name)).unwrap();
        assert!(bundled == regenerated, "{name:?} differs from the generator output");
    }
}
