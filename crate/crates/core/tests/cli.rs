use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn m3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m3d"))
        .args(args)
        .env_remove("M3D_SEED")
        .output()
        .unwrap()
}

fn result_line(o: &Output) -> String {
    let out = String::from_utf8_lossy(&o.stdout);
    out.lines().last().unwrap_or_default().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "preset = \"desk\"\nmax_steps = 3\ncheckpoint_every = 0\n").unwrap();

    let o = m3d(&["gen-data", "--kind", "shapes", "--n", "12", "--out", p(&data), "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(result_line(&o).starts_with("RESULT "));
    assert!(data.join("manifest.txt").exists());

    let o = m3d(&["train", "--config", p(&cfg), "--task", "shapes", "--data", p(&data), "--out", p(&run), "--log-every", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let ckpt = run.join("checkpoint");

    let samples = tmp.path().join("samples");
    let src = data.join("samples/000000.src.m3dt");
    let o = m3d(&["sample", "--checkpoint", p(&ckpt), "--source", p(&src), "--mode", "prior", "--n", "3", "--out", p(&samples)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(samples.join("sample_002.ppm").exists());

    let reference = data.join("samples/000001.tgt.m3dt");
    let o = m3d(&["sample", "--checkpoint", p(&ckpt), "--source", p(&src), "--mode", "reference", "--reference", p(&reference), "--out", p(&samples)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let report = tmp.path().join("eval.csv");
    let o = m3d(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--sources", "3", "--samples-per-source", "2", "--out", p(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(result_line(&o).contains("diversity="), "{}", result_line(&o));

    let o = m3d(&["inspect-tokens", "--checkpoint", p(&ckpt), "--reference", p(&reference)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");

    assert_eq!(m3d(&["--help"]).status.code(), Some(0));
    assert_eq!(m3d(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(m3d(&["sample", "--checkpoint", p(&missing), "--out", p(&missing)]).status.code(), Some(2));

    let o = m3d(&["sample", "--task", "speech→text", "--mode", "reference", "--checkpoint", p(&missing), "--out", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(result_line(&o).starts_with("RESULT "));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "latent_dim = 0\n").unwrap();
    let o = m3d(&["train", "--config", p(&bad), "--task", "shapes", "--out", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("latent_dim"));
}

#[test]
fn gradcheck_command_passes_on_micro() {
    let o = m3d(&["gradcheck", "--task", "text→speech", "--coords", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(result_line(&o).contains("pass=true"), "{}", result_line(&o));
}
