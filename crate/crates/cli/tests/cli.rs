use std::process::{Command, Output};

fn ouro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ouro"))
        .args(args)
        .env_remove("OURO_THREADS")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

const HEADER: &str =
    "variant,axis,point,iteration,alloc_ms,free_ms,mean_all_ms,mean_subsequent_ms,verified";

#[test]
fn reference_trial_writes_clean_csv() {
    let out = ouro(&[
        "trial",
        "--variant",
        "page",
        "--allocations",
        "1024",
        "--size-bytes",
        "1000",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], HEADER);
    assert_eq!(lines.len(), 1 + 10 + 1);
    assert!(lines[1].starts_with("page,size,1000,1,"));
    assert!(lines[11].starts_with("page,size,1000,summary,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")));
}

#[test]
fn single_iteration_is_a_usage_error() {
    let out = ouro(&["trial", "--iterations", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--iterations"));
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_flag_and_bad_values_exit_2() {
    for args in [
        &["trial", "--bogus"][..],
        &["trial", "--variant", "slab"],
        &["trial", "--backoff", "spin"],
        &["trial", "--threads", "0"],
        &["sweep", "--axis", "time"],
        &["frobnicate"],
    ] {
        assert_eq!(ouro(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn invalid_heap_configuration_exits_2() {
    let out = ouro(&["trial", "--heap-bytes", "1000000"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("power of two"));
}

#[test]
fn oom_sized_trial_exits_1() {
    // A 1 MiB page heap holds 64 pages of 1024 bytes.
    let out = ouro(&[
        "trial",
        "--heap-bytes",
        "1048576",
        "--size-bytes",
        "1024",
        "--allocations",
        "100",
        "--iterations",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        stdout(&out),
        format!("{HEADER}\npage,size,1024,summary,,,,,false\n")
    );
}

#[test]
fn sweep_defaults_to_the_size_grid() {
    let out = ouro(&[
        "sweep",
        "--variant",
        "vl-chunk",
        "--iterations",
        "2",
        "--allocations",
        "64",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let points: Vec<String> = stdout(&out)
        .lines()
        .filter(|l| l.contains(",summary,"))
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .collect();
    assert_eq!(
        points,
        ["1000", "2000", "3000", "4000", "5000", "6000", "7000", "8000"]
    );
    assert!(stdout(&out)
        .lines()
        .skip(1)
        .all(|l| l.starts_with("vl-chunk,size,")));
}

#[test]
fn count_sweep_with_explicit_points_to_a_file() {
    let dir = std::env::temp_dir().join(format!("ouro-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("sweep.csv");
    let out = ouro(&[
        "sweep",
        "--variant",
        "va-page",
        "--axis",
        "count",
        "--points",
        "8,16",
        "--iterations",
        "3",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * (3 + 1));
    assert!(text.contains("va-page,count,16,summary,"));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn threads_come_from_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_ouro"))
        .args([
            "trial",
            "--variant",
            "chunk",
            "--allocations",
            "32",
            "--iterations",
            "2",
            "--stats",
        ])
        .env("OURO_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    // Statistics go to stderr, leaving stdout as pure CSV.
    assert!(String::from_utf8_lossy(&out.stderr).contains("AllocatorStats"));
    assert!(stdout(&out).starts_with(HEADER));
    let bad = Command::new(env!("CARGO_BIN_EXE_ouro"))
        .args(["trial", "--iterations", "2"])
        .env("OURO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn selftest_passes_on_every_variant() {
    let out = ouro(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 36);
    for v in [
        "page", "chunk", "va-page", "va-chunk", "vl-page", "vl-chunk",
    ] {
        assert_eq!(
            text.lines()
                .filter(|l| l.split_whitespace().nth(1) == Some(v))
                .count(),
            6,
            "{v}"
        );
    }
    assert!(text.lines().all(|l| l.starts_with("ok ")));
}
