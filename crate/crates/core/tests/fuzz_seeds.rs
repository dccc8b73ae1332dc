//! Replays the checked-in fuzz corpus seeds through the same entry points the
//! fuzz targets use.

use std::path::{Path, PathBuf};

use insenskit::config::ScenarioConfig;
use insenskit::io::{parse_trace_samples, Container};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn config_seeds() {
    let mut accepted = 0;
    for (p, bytes) in seeds("config") {
        let text = std::str::from_utf8(&bytes).unwrap();
        if ScenarioConfig::from_str_in(text, Path::new(".")).is_ok() {
            accepted += 1;
        } else {
            assert!(p.ends_with("bad_keys.toml"), "{} rejected", p.display());
        }
    }
    assert!(accepted >= 4);
}

#[test]
fn container_seeds() {
    for (p, bytes) in seeds("container") {
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        match Container::decode(&bytes) {
            Ok(c) => {
                assert!(!["bad_dt", "truncated", "huge_dims", "nan"].contains(&name.as_str()), "{name} accepted");
                assert_eq!(c.encode(), bytes);
            }
            Err(_) => assert!(["bad_dt", "truncated", "huge_dims", "nan"].contains(&name.as_str()), "{name} rejected"),
        }
    }
}

#[test]
fn trace_csv_seeds() {
    for (p, bytes) in seeds("trace_csv") {
        let name = p.file_name().unwrap().to_str().unwrap();
        let ok = parse_trace_samples(std::str::from_utf8(&bytes).unwrap()).is_ok();
        assert_eq!(ok, ["bump.csv", "two_rows.csv"].contains(&name), "{name}");
    }
}
