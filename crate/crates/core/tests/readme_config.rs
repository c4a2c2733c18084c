use ainfonce::config::{key_paths, RunConfig};

#[test]
fn readme_config_block_is_the_default() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let start = readme.find("```json\n").unwrap() + 8;
    let end = start + readme[start..].find("```").unwrap();
    let block = &readme[start..end];
    let cfg = RunConfig::from_json(block).unwrap();
    assert_eq!(cfg, RunConfig::default());
    let v: serde_json::Value = serde_json::from_str(block).unwrap();
    let listed = key_paths(&serde_json::from_value(v).unwrap());
    assert_eq!(listed, key_paths(&RunConfig::default()));
}
