use std::path::Path;

#[test]
fn every_chapter_is_listed_and_doctested() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let summary = std::fs::read_to_string(root.join("book/src/SUMMARY.md")).unwrap();
    let includes = std::fs::read_to_string(root.join("crates/core/src/lib.rs")).unwrap()
        + &std::fs::read_to_string(root.join("crates/harness/src/lib.rs")).unwrap();
    for entry in std::fs::read_dir(root.join("book/src")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name == "SUMMARY.md" || !name.ends_with(".md") {
            continue;
        }
        assert!(summary.contains(&format!("({name})")), "{name} missing from SUMMARY.md");
        assert!(includes.contains(&format!("book/src/{name}\")")), "{name} is not doctested");
    }
}
