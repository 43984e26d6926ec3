use std::path::Path;
use std::process::{Command, Output};

use liconet::format::{load_model, Model};
use liconet::wav::write_wav_pcm16;

fn liconet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liconet"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn noise_wav(path: &Path, seconds: usize) {
    let mut x = 0x1234_5678u32;
    let pcm: Vec<f32> = (0..16000 * seconds)
        .map(|i| {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            let tone = (i as f32 * 0.2).sin() * 0.3;
            tone + (x as f32 / u32::MAX as f32 - 0.5) * 0.1
        })
        .collect();
    write_wav_pcm16(path, &pcm, 16000).unwrap();
}

#[test]
fn init_linearize_quantize_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (f, l, q, wav, post) = (
        d.join("f.lcn"),
        d.join("l.lcn"),
        d.join("q.lcn"),
        d.join("a.wav"),
        d.join("post.txt"),
    );
    noise_wav(&wav, 2);

    let o = liconet(&[
        "init",
        "--arch",
        "lico",
        "--preset",
        "small",
        "--seed",
        "3",
        "--out",
        s(&f),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(liconet(&["check", s(&f), "--chunk", "3"]).status.success());
    assert!(liconet(&["linearize", s(&f), "--out", s(&l)])
        .status
        .success());
    let o = liconet(&["quantize", s(&l), "--calib", s(&wav), "--out", s(&q)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    assert!(matches!(
        load_model(&l).unwrap().model,
        Model::Linearized(_)
    ));
    assert!(matches!(load_model(&q).unwrap().model, Model::Quantized(_)));
    for (file, kind) in [(&f, "lico"), (&l, "linearized"), (&q, "quantized")] {
        let o = liconet(&["info", s(file)]);
        assert!(o.status.success());
        let text = stdout(&o);
        assert!(text.starts_with("params "), "{text}");
        assert!(text.contains(kind), "{text}");
    }

    // each engine on the file it runs from
    let mut counts = Vec::new();
    for (file, engine) in [(&f, "conv"), (&l, "linear"), (&q, "int8")] {
        let o = liconet(&[
            "run",
            s(file),
            "--wav",
            s(&wav),
            "--engine",
            engine,
            "--posteriors",
            s(&post),
        ]);
        assert!(
            o.status.success(),
            "{engine}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let dump = std::fs::read_to_string(&post).unwrap();
        for line in dump.lines() {
            assert_eq!(line.split_whitespace().count(), 12, "{line}");
        }
        counts.push(dump.lines().count());
    }
    assert!(counts[0] > 0 && counts.iter().all(|&c| c == counts[0]));

    // the quantized file only runs on the int8 engine
    assert!(
        liconet(&["run", s(&q), "--wav", s(&wav), "--engine", "int8"])
            .status
            .success()
    );
    assert!(
        !liconet(&["run", s(&q), "--wav", s(&wav), "--engine", "conv"])
            .status
            .success()
    );

    let o = liconet(&["run", s(&f), "--wav", s(&wav), "--threshold", "1.1"]);
    assert!(o.status.success());
    assert!(stdout(&o).trim().is_empty());

    let o = liconet(&["verify", s(&f), "--steps", "200"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let f = d.join("f.lcn");
    assert!(liconet(&[
        "init",
        "--arch",
        "lico",
        "--preset",
        "large",
        "--out",
        s(&f)
    ])
    .status
    .success());

    let o = liconet(&["check", s(&f), "--chunk", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("block1.conv1"));

    let junk = d.join("junk.lcn");
    std::fs::write(&junk, b"nope").unwrap();
    assert_eq!(liconet(&["info", s(&junk)]).status.code(), Some(1));
    assert_eq!(
        liconet(&["info", s(&d.join("missing"))]).status.code(),
        Some(1)
    );

    let stereo = d.join("8k.wav");
    write_wav_pcm16(&stereo, &[0.0; 800], 8000).unwrap();
    assert_eq!(
        liconet(&["run", s(&f), "--wav", s(&stereo)]).status.code(),
        Some(1)
    );

    assert_eq!(liconet(&["frobnicate"]).status.code(), Some(2));
}
