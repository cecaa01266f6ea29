#![allow(dead_code)]

//! Fixture datasets on disk and a runner for the built binary.

use std::path::Path;
use std::process::{Command, Output};

use vesselseg::imaging::write_netpbm;
use vesselseg::synthetic::fundus_pair;

/// `n` synthetic RGB fundus pairs as `root/images/NN.ppm`, `root/masks/NN.pgm`.
pub fn write_dataset(root: &Path, n: u32, width: usize, height: usize) {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    for id in 1..=n {
        let (img, mask) = fundus_pair(width, height, id as u64);
        write_netpbm(&root.join(format!("images/{id:02}.ppm")), &img).unwrap();
        write_netpbm(&root.join(format!("masks/{id:02}.pgm")), &mask.to_u8()).unwrap();
    }
}

pub fn vesselseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesselseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("temporary paths are UTF-8")
}

/// Relative paths of every file under `dir`, sorted.
pub fn tree(dir: &Path) -> Vec<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push(p.strip_prefix(base).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Small, fast run configuration over `root`.
pub fn small_config(root: &Path, epochs: usize) -> String {
    format!(
        "[data]\nroot = {:?}\n\n[preprocess]\nsize = 64\n\n[split]\ntrain_count = 4\ntest_count = 0\nseed = 1\n\n\
         [model]\ndepth = 2\nbase_channels = 8\n\n[train]\nepochs = {epochs}\nbatch_size = 2\nlearning_rate = 1e-3\nseed = 7\n",
        path(root)
    )
}
