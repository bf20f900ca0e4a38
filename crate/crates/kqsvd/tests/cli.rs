use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kqsvd::bundle::{read_manifest, MANIFEST};
use kqsvd::read_plans;
use kqsvd_core::cachestore::Dtype;

fn kqsvd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kqsvd"))
        .args(args)
        .env("KQSVD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kqsvd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 12] = [
    "--layers", "2", "--query-heads", "4", "--kv-heads", "2", "--head-dim", "8", "--tokens", "32",
    "--sequences", "2",
];

fn gen_small(out: &Path, extra: &[&str]) {
    let mut args = vec!["gen", "--out", p(out)];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect()
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, &["--seed", "7"]);
    gen_small(&b, &["--seed", "7"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let c = tmp.path().join("c");
    gen_small(&c, &["--seed", "8"]);
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let res = kqsvd(&["gen", "--out", p(&out), "--rank", "0"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("Usage"));
    assert!(!out.exists());

    assert_eq!(kqsvd(&["verify", "lemma"]).status.code(), Some(1));
    assert_eq!(kqsvd(&["calibrate", "--train", "x", "--method", "svd", "--out", "y"]).status.code(), Some(1));
    let both = kqsvd(&["calibrate", "--train", "x", "--method", "ksvd", "--epsilon", "0.1", "--rank", "2", "--out", "y"]);
    assert_eq!(both.status.code(), Some(1));
    assert_eq!(kqsvd(&["gen", "--out", p(&out), "--head-dim", "4", "--rank", "5"]).status.code(), Some(1));
    assert_eq!(kqsvd(&["--help"]).status.code(), Some(0));
}

#[test]
fn io_and_validation_errors_have_their_own_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = tmp.path().join("plans");
    let res = kqsvd(&["calibrate", "--train", p(&missing), "--method", "ksvd", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("not found"));

    let b = tmp.path().join("b");
    gen_small(&b, &[]);
    let res = kqsvd(&["calibrate", "--train", p(&b), "--method", "ksvd", "--rank", "9", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());

    ok(&["calibrate", "--train", p(&b), "--method", "ksvd", "--rank", "2", "--out", p(&out)]);
    let other = tmp.path().join("other");
    gen_small(&other, &["--head-dim", "4", "--rank", "4"]);
    let csv = tmp.path().join("e.csv");
    let res = kqsvd(&["evaluate", "--eval", p(&other), "--plans", p(&out), "--out", p(&csv)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!csv.exists());

    let p3 = tmp.path().join("p3");
    ok(&["calibrate", "--train", p(&b), "--method", "kqsvd", "--rank", "3", "--out", p(&p3)]);
    let res = kqsvd(&["evaluate", "--eval", p(&b), "--plans", p(&out), "--plans", p(&p3), "--out", p(&csv)]);
    assert_eq!(res.status.code(), Some(2), "mixed ranks");
}

#[test]
fn default_gen_matches_desk_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let b = tmp.path().join("desk");
    let stdout = ok(&["gen", "--out", p(&b)]);
    assert!(stdout.contains("L=4 h=8 g=8 d=32 D=256 T=256 n_seq=8"), "{stdout}");
    let m = read_manifest(&b).unwrap();
    assert_eq!(
        (m.layers, m.query_heads, m.kv_heads, m.head_dim, m.model_dim, m.tokens, m.sequences),
        (4, 8, 8, 32, 256, 256, 8)
    );
    assert_eq!((m.dtype, m.seed), (Dtype::F32, Some(0)));
    assert!(b.join(MANIFEST).is_file());
}

#[test]
fn epsilon_zero_recovers_intrinsic_rank() {
    let tmp = tempfile::tempdir().unwrap();
    let b = tmp.path().join("b");
    gen_small(&b, &["--rank", "3", "--noise", "0", "--dtype", "f64"]);
    for method in ["ksvd", "eigen", "kqsvd"] {
        let out = tmp.path().join(method);
        ok(&["calibrate", "--train", p(&b), "--method", method, "--epsilon", "0", "--out", p(&out)]);
        assert_eq!(read_plans(&out).unwrap().layer_ranks(), vec![(3, 3); 2], "{method}");
    }
}

#[test]
fn ranks_are_shared_across_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let b = tmp.path().join("b");
    gen_small(&b, &["--decay", "0.7"]);
    let ranks: Vec<_> = ["ksvd", "kqsvd"]
        .iter()
        .map(|m| {
            let out = tmp.path().join(m);
            ok(&["calibrate", "--train", p(&b), "--method", m, "--out", p(&out)]);
            read_plans(&out).unwrap().layer_ranks()
        })
        .collect();
    assert_eq!(ranks[0], ranks[1]);
    assert!(ranks[0].iter().all(|&(k, v)| k < 8 && v < 8));
}

#[test]
fn evaluate_lossless_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let b = tmp.path().join("b");
    gen_small(&b, &[]);
    let mut plan_args = Vec::new();
    for method in ["ksvd", "eigen", "kqsvd"] {
        let out = tmp.path().join(method);
        ok(&["calibrate", "--train", p(&b), "--method", method, "--rank", "8", "--out", p(&out)]);
        plan_args.push(out);
    }
    let run = |csv: &Path| {
        let mut args = vec!["evaluate", "--eval", p(&b), "--out", p(csv)];
        for d in &plan_args {
            args.extend(["--plans", p(d)]);
        }
        ok(&args);
        fs::read_to_string(csv).unwrap()
    };
    let first = run(&tmp.path().join("1.csv"));
    let second = run(&tmp.path().join("2.csv"));
    assert_eq!(first, second);

    let mut lines = first.lines();
    assert_eq!(
        lines.next().unwrap(),
        "layer,method,err_K,err_Q,err_V,err_KQT,err_out,bound,err_out_spectral"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 3 + 3);
    assert_eq!(rows.iter().filter(|r| r[0] == "mean").count(), 3);
    for row in &rows {
        for x in &row[2..7] {
            assert!(x.parse::<f64>().unwrap() <= 1e-10, "{row:?}");
        }
    }
}

#[test]
fn sweep_single_beta_matches_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let b = tmp.path().join("b");
    gen_small(&b, &[]);
    let sweep = tmp.path().join("sweep.csv");
    ok(&["sweep-unbalance", "--eval", p(&b), "--betas", "1", "--rank", "3", "--out", p(&sweep)]);
    let sweep = fs::read_to_string(&sweep).unwrap();

    let mut args = vec!["evaluate".to_string(), "--eval".into(), p(&b).into()];
    for method in ["ksvd", "eigen", "kqsvd"] {
        let out = tmp.path().join(method);
        ok(&["calibrate", "--train", p(&b), "--method", method, "--rank", "3", "--out", p(&out)]);
        args.extend(["--plans".into(), p(&out).into()]);
    }
    let csv = tmp.path().join("e.csv");
    args.extend(["--out".into(), p(&csv).into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let eval = fs::read_to_string(&csv).unwrap();

    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("beta,method,err_out_mean"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], "1");
        let want = eval
            .lines()
            .find(|l| l.starts_with(&format!("mean,{},", f[1])))
            .unwrap()
            .split(',')
            .nth(6)
            .unwrap();
        assert_eq!(f[2], want, "{}", f[1]);
    }
}

#[test]
fn sweep_rejects_non_positive_beta() {
    let tmp = tempfile::tempdir().unwrap();
    let b = tmp.path().join("b");
    gen_small(&b, &[]);
    let out = tmp.path().join("s.csv");
    let res = kqsvd(&["sweep-unbalance", "--eval", p(&b), "--betas", "1,0", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn verify_commands_pass_and_report_slack() {
    for (theorem, trials) in [("gap", "50"), ("bound", "50"), ("gqa", "20"), ("scaling", "30")] {
        let stdout = ok(&["verify", theorem, "--trials", trials, "--seed", "3"]);
        assert!(stdout.contains("slack"), "{stdout}");
        assert!(stdout.contains("0 violations"), "{stdout}");
    }
    assert_eq!(kqsvd(&["verify", "gap", "--trials", "0"]).status.code(), Some(1));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_kqsvd"))
        .args(["verify", "gap", "--trials", "1"])
        .env("KQSVD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
