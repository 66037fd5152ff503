use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pointdico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointdico")).args(args).env("PDCO_TEST_MODE", "1").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "\
groups = 8
group_size = 8
embed_dim = 16
depth = 1
heads = 2
patch_hidden = 8
pos_hidden = 8
decoder_depth = 1
feat_dim = 8
proj_hidden = 8
cond_dim = 8
h2_hidden = 4
dip_widths = 3,8,8
te_dim = 4
steps = 10
batch_size = 4
max_steps = 3
";

fn write_config(dir: &Path, data: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("# tiny run\n{TINY}data_dir = {}\n{extra}", data.display())).unwrap();
    path.to_str().unwrap().to_string()
}

fn gen_data(dir: &Path) -> String {
    let data = dir.join("data");
    let d = data.to_str().unwrap();
    let out = pointdico(&["gen-data", "--out", d, "--seed", "3", "--per-class", "2", "--test-per-class", "1", "--points", "96"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    d.to_string()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&pointdico(&[])), 1);
    assert_eq!(code(&pointdico(&["frobnicate"])), 1);
    assert_eq!(code(&pointdico(&["export", "--ckpt", "x", "--what", "weights"])), 1);
    assert_eq!(code(&pointdico(&["--help"])), 0);
}

#[test]
fn config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "learning_rate = 0.1\n").unwrap();
    let out = pointdico(&["pretrain", "--config", bad.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let missing = write_config(dir.path(), &dir.path().join("nowhere"), "");
    assert_eq!(code(&pointdico(&["pretrain", "--config", &missing, "--out", "unused"])), 2);
    assert_eq!(code(&pointdico(&["probe", "--ckpt", "no-such-checkpoint", "--data", &data])), 2);
}

#[test]
fn diverging_run_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(dir.path(), Path::new(&data), "lr = 1e300\nwarmup_epochs = 0\nmax_steps = 6\n");
    let out = pointdico(&["pretrain", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(dir.path(), Path::new(&data), "");
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = pointdico(&["pretrain", "--config", &cfg, "--out", run_s]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let losses = stdout(&pointdico(&["export", "--ckpt", run_s, "--what", "losses"]));
    let lines: Vec<&str> = losses.lines().collect();
    assert_eq!(lines[0], "step,L_total,L_dif,L_con,lr,wall_ms");
    assert_eq!(lines.len(), 4);

    let samples = dir.path().join("samples");
    let out = pointdico(&["sample", "--ckpt", run_s, "--id", "train_cone_0001", "--out", samples.to_str().unwrap(), "--every", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("chamfer(final, input)"));
    // input, masked, final and floor(10 / 4) + 1 trajectory states.
    assert_eq!(fs::read_dir(&samples).unwrap().count(), 6);
    assert_eq!(code(&pointdico(&["sample", "--ckpt", run_s, "--id", "nope", "--out", "x"])), 2);

    let probe = pointdico(&["probe", "--ckpt", run_s, "--data", &data]);
    assert_eq!(code(&probe), 0);
    assert!(stdout(&probe).starts_with("probe accuracy "));
    for extra in [None, Some("--ensemble")] {
        let mut args = vec!["zeroshot", "--ckpt", run_s, "--data", &data];
        args.extend(extra);
        let out = pointdico(&args);
        assert_eq!(code(&out), 0);
        assert!(stdout(&out).starts_with("zero-shot accuracy "));
    }

    let feats = stdout(&pointdico(&["export", "--ckpt", run_s, "--what", "features"]));
    let rows: Vec<&str> = feats.lines().collect();
    assert_eq!(rows.len(), 1 + 5);
    assert_eq!(rows[0].split(',').count(), 2 + 8);
}
