#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_splitinf"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawning splitinf")
}

pub fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "splitinf {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

/// Writes a small 28x28 IDX image/label pair. Each class lights a distinct
/// 7x7 block so even one epoch learns something.
pub fn write_synthetic_mnist(dir: &Path, name: &str, count: usize, seed: u32) -> (PathBuf, PathBuf) {
    let mut state = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        state
    };
    let mut images = Vec::new();
    images.extend(be(0x0803));
    images.extend(be(count as u32));
    images.extend(be(28));
    images.extend(be(28));
    let mut labels = Vec::new();
    labels.extend(be(0x0801));
    labels.extend(be(count as u32));
    for i in 0..count {
        let label = i % 10;
        labels.push(label as u8);
        let (br, bc) = (label / 4 * 7 + 3, label % 4 * 7);
        for r in 0..28 {
            for c in 0..28 {
                let on = (br..br + 7).contains(&r) && (bc..bc + 7).contains(&c);
                let noise = (next() % 40) as u8;
                images.push(if on { 215 + noise } else { noise });
            }
        }
    }
    let ip = dir.join(format!("{name}-images-idx3-ubyte"));
    let lp = dir.join(format!("{name}-labels-idx1-ubyte"));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip, lp)
}

/// A config using the synthetic data in `dir` and a short trajectory.
pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    write_synthetic_mnist(dir, "train", 64, 1);
    write_synthetic_mnist(dir, "t10k", 40, 2);
    let text = format!(
        r#"
seed = 11
output_dir = "out"

[dataset]
train_images = "train-images-idx3-ubyte"
train_labels = "train-labels-idx1-ubyte"
test_images = "t10k-images-idx3-ubyte"
test_labels = "t10k-labels-idx1-ubyte"

[train]
epochs = 1
batch = 16
seed = 3

[prune]
threshold = 0.02

[trajectory]
waypoints = [
    {{ position = ["1 m", "0 m"], inferences = 20 }},
    {{ position = ["3 m", "4 m"], inferences = 20 }},
]

[sweep]
bandwidths = ["15 kHz", "15 MHz"]
thresholds = [0.0, 0.01, 0.02, 0.05]
draws = 30
{extra}
"#
    );
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

/// Independent reader for `SPLITNN1` files: retained (mask-bit) counts per
/// layer, without going through the library decoder.
pub fn scan_retained(path: &Path) -> Vec<usize> {
    let b = fs::read(path).unwrap();
    assert_eq!(&b[..8], b"SPLITNN1");
    let body = &b[..b.len() - 4];
    let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32_bitwise(body), "checksum");
    let u32_at = |p: usize| u32::from_le_bytes(b[p..p + 4].try_into().unwrap()) as usize;
    let layers = u32_at(24);
    let mut pos = 28;
    let mut out = Vec::new();
    for _ in 0..layers {
        let kind = b[pos];
        pos += 2;
        pos += 4 * match kind {
            0 => 5,
            1 => 3,
            2 => 2,
            k => panic!("kind {k}"),
        };
        let nw = u32_at(pos);
        pos += 4 + 4 * nw;
        let nb = u32_at(pos);
        pos += 4 + 4 * nb;
        let n = nw + nb;
        let bytes = &b[pos..pos + n.div_ceil(8)];
        out.push((0..n).filter(|i| bytes[i / 8] >> (i % 8) & 1 == 1).count());
        pos += n.div_ceil(8);
        let units = u32_at(pos);
        pos += 4 + units.div_ceil(8);
    }
    assert_eq!(pos, b.len() - 4);
    out
}

/// Bitwise CRC-32 (IEEE, reflected, poly 0xEDB88320).
fn crc32_bitwise(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

pub fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}
