#![allow(dead_code)]

use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use image::{ImageFormat, Rgb, RgbImage};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl From<Output> for Run {
    fn from(o: Output) -> Self {
        Self {
            code: o.status.code().expect("terminated by signal"),
            stdout: String::from_utf8(o.stdout).unwrap(),
            stderr: String::from_utf8(o.stderr).unwrap(),
        }
    }
}

fn command(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lab-anomaly"));
    cmd.args(args).env_remove("RUST_LOG");
    cmd
}

pub fn run(args: &[&str]) -> Run {
    command(args).stdin(Stdio::null()).output().unwrap().into()
}

pub fn run_with_stdin(args: &[&str], stdin: &str) -> Run {
    let mut child = command(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap().into()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn write_png(path: &Path, seed: u8) {
    let img = RgbImage::from_fn(64, 48, |x, y| {
        Rgb([(x as u8).wrapping_add(seed), y as u8, seed.wrapping_mul(41)])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).unwrap();
    std::fs::write(path, buf.into_inner()).unwrap();
}

/// Writes `names` as distinct PNGs into `dir`.
pub fn image_dir(dir: &Path, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        write_png(&dir.join(name), i as u8 + 1);
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}
