use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn rnp(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rnp")).args(args).env("RNP_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = rnp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// A briefly trained `|z| = 8`, 4×2-step checkpoint on 16 synthetic images.
fn checkpoint(dir: &Path) -> PathBuf {
    let ck = dir.join("m.rnp");
    let s = ck.to_str().unwrap();
    ok(&["train", "--synth", "16", "--z-dim", "8", "--tau-top", "4", "--tau-sub", "2", "--steps", "2", "--batch", "8", "--out", s]);
    ck
}

fn png(path: &Path) -> (png::OutputInfo, Vec<u8>) {
    let mut dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(path).unwrap())).read_info().unwrap();
    let mut buf = vec![0; dec.output_buffer_size().unwrap()];
    let info = dec.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info, buf)
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    assert!(ck.exists());
    let csv = fs::read_to_string(ck.with_extension("csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,recon,part_reg,kl,total");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn parse_writes_depth_first_structure() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let out = dir.path().join("parse");
    ok(&["parse", "--checkpoint", ck.to_str().unwrap(), "--synth", "16", "--index", "0,5", "--out", out.to_str().unwrap(), "--zoom", "2"]);
    for idx in [0, 5] {
        let d = out.join(format!("image_{idx:05}"));
        let json: Value = serde_json::from_str(&fs::read_to_string(d.join("parse.json")).unwrap()).unwrap();
        let parts = json["parts"].as_array().unwrap();
        assert_eq!(parts.len(), 4);
        let colors: Vec<&str> = parts.iter().map(|p| p["color"].as_str().unwrap()).collect();
        assert_eq!(colors, ["blue", "red", "green", "orange"]);
        for (t, p) in parts.iter().enumerate() {
            assert_eq!(p["path"], serde_json::json!([t]));
            let subs = p["subparts"].as_array().unwrap();
            assert_eq!(subs.len(), 2);
            assert_eq!(subs[1]["path"], serde_json::json!([t, 1]));
            assert!(d.join(format!("part_{t}.png")).exists());
        }
        assert!(!d.join("part_4.png").exists());
        let (info, _) = png(&d.join("canvas.png"));
        assert_eq!((info.width, info.height), (56, 56));
        // 4 rows of 2 tiles, 12-pixel tiles at zoom 2 with 1-pixel gutters.
        let (info, _) = png(&d.join("subparts.png"));
        assert_eq!((info.width, info.height), (2 * 25 - 1, 4 * 25 - 1));
        let (info, rgb) = png(&d.join("parts.png"));
        assert_eq!(info.color_type, png::ColorType::Rgb);
        for px in rgb.chunks(3) {
            // Every lit pixel is a scaled palette colour.
            if px != [0, 0, 0] {
                assert!(rnp::cli::PALETTE[..4].iter().any(|c| is_scaled(px, c)), "{px:?}");
            }
        }
    }
}

fn is_scaled(px: &[u8], c: &[u8; 3]) -> bool {
    let big = (0..3).max_by_key(|&i| c[i]).unwrap();
    let k = px[big] as f64 / c[big] as f64;
    px.iter().zip(c).all(|(&p, &c)| (p as f64 - k * c as f64).abs() <= 1.0)
}

#[test]
fn sample_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["sample", "--checkpoint", ck.to_str().unwrap(), "--n", "4", "--seed", "7", "--out", d.to_str().unwrap()]);
    }
    for k in 0..4 {
        let f = format!("sample_{k:03}.png");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap());
    }
    assert!(!a.join("sample_004.png").exists());
}

#[test]
fn two_step_interpolation_is_the_endpoint_decodes() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let (ck, lerp, parse) = (ck.to_str().unwrap(), dir.path().join("lerp"), dir.path().join("parse"));
    ok(&["interpolate", "--checkpoint", ck, "--synth", "16", "--from", "3", "--to", "4", "--steps", "2", "--out", lerp.to_str().unwrap()]);
    ok(&["parse", "--checkpoint", ck, "--synth", "16", "--index", "3,4", "--out", parse.to_str().unwrap()]);
    assert!(!lerp.join("interp_002.png").exists());
    // A zero-noise parse decodes the posterior mean, which is exactly α = 0 and α = 1.
    assert_eq!(fs::read(lerp.join("interp_000.png")).unwrap(), fs::read(parse.join("image_00003/canvas.png")).unwrap());
    assert_eq!(fs::read(lerp.join("interp_001.png")).unwrap(), fs::read(parse.join("image_00004/canvas.png")).unwrap());

    let out = rnp(&["interpolate", "--checkpoint", ck, "--synth", "16", "--from", "class:0", "--to", "class:9", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let out = rnp(&["interpolate", "--checkpoint", ck, "--synth", "16", "--from", "0", "--to", "1", "--steps", "1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn export_latents_has_one_program_row_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let csv = dir.path().join("z.csv");
    ok(&["export-latents", "--checkpoint", ck.to_str().unwrap(), "--synth", "16", "--out", csv.to_str().unwrap()]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("index,label,level,step,z0,"));
    assert_eq!(lines[0].split(',').count(), 4 + 8);
    assert_eq!(lines.len(), 1 + 16 * (1 + 4));
    assert!(lines[1].starts_with("0,0,2,,"));
    assert!(lines[2].starts_with("0,0,1,0,"));
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 12));
}

#[test]
fn exit_codes() {
    assert_eq!(rnp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rnp(&["train", "--synth", "4"]).status.code(), Some(1));
    assert_eq!(rnp(&["sample", "--checkpoint", "/nonexistent.rnp", "--out", "x"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.rnp");
    fs::write(&junk, b"RNP1 not really").unwrap();
    assert_eq!(rnp(&["sample", "--checkpoint", junk.to_str().unwrap(), "--out", "x"]).status.code(), Some(2));
    let img = dir.path().join("bad-images");
    fs::write(&img, [0u8; 3]).unwrap();
    let p = img.to_str().unwrap();
    let out = rnp(&["train", "--images", p, "--labels", p, "--out", "x.rnp"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn transfer_freezes_the_hypernetwork() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    ok(&[
        "transfer", "--synth", "24", "--holdout", "2", "--z-dim", "8", "--tau-top", "2", "--tau-sub", "2", "--steps", "2", "--batch", "8",
        "--transfer-steps", "2", "--out", out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("transfer.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][5], rows[1][5]);
    assert!(out.join("base.rnp").exists() && out.join("transfer.rnp").exists());
}
