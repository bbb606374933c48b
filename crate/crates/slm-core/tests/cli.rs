//! End-to-end checks of the `slm` binary: flag handling, config precedence,
//! output formats, exit codes, and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slm_core::corpus::{generate, TaskKind, TaskSpec};
use slm_core::ordering::{parse_trace, restore, EOL_MARK, EOR_MARK};

fn slm() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slm"));
    cmd.env_remove("SLM_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn slm")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Micro config that trains in a couple of seconds.
const MICRO_CONF: &str = "\
task = copy
vocab-size = 10
min-len = 2
max-len = 5
task-seed = 9
train-count = 60
dev-count = 12
test-count = 12
max-steps = 12
d-model = 16
n-heads = 2
n-layers = 1
d-ff = 32
dropout = 0.1
steps = 40
batch-size = 8
lr = 2e-3
warmup = 20
eval-interval = 20
beam = 2
";

fn micro_checkpoint(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let conf = write(dir, "micro.conf", MICRO_CONF);
    let ckpt = dir.join(format!("micro-{seed}.slmc"));
    let metrics = dir.join(format!("micro-{seed}.csv"));
    let out = run(slm()
        .arg("train")
        .arg("--config")
        .arg(&conf)
        .arg("--seed")
        .arg(seed.to_string())
        .arg("--strategy")
        .arg("slm-random")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--metrics-out")
        .arg(&metrics));
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    (ckpt, metrics)
}

#[test]
fn orderings_count_enumerate_sample() {
    let out = run(slm().arg("orderings").arg("3"));
    assert!(out.status.success());
    assert_eq!(stdout(&out).lines().next(), Some("16"));

    let out = run(slm().arg("orderings").arg("1").arg("--enumerate"));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "4");
    assert_eq!(lines.len(), 5);
    assert!(lines.contains(&"[EOL]/+ t1/+ [EOR]"));
    assert!(lines.contains(&"[EOR]/- t1/- [EOL]"));

    let out = run(slm().arg("orderings").arg("4").arg("--sample").arg("5").arg("--seed").arg("3"));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 6);
    for line in text.lines().skip(1) {
        let seq = parse_trace(line).unwrap();
        let (tokens, _) = restore(&seq, &EOL_MARK.to_string(), &EOR_MARK.to_string()).unwrap();
        assert_eq!(tokens.len(), 4);
    }
    // same seed, same samples
    let again = run(slm().arg("orderings").arg("4").arg("--sample").arg("5").arg("--seed").arg("3"));
    assert_eq!(text, stdout(&again));

    // guardrails surface as config errors
    let out = run(slm().arg("orderings").arg("63"));
    assert_eq!(out.status.code(), Some(2));
    let out = run(slm().arg("orderings").arg("11").arg("--enumerate"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn decode_emits_parseable_orders_and_is_thread_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = micro_checkpoint(dir.path(), 1);
    let input = write(dir.path(), "in.txt", "w03 w04 w05\nw06 w07\nw08 w03\n");
    let base = run(slm()
        .arg("decode")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--emit-order")
        .arg(&input));
    assert!(base.status.success());
    let text = stdout(&base);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len() % 3, 0, "line, order, score per record: {text}");
    for chunk in lines.chunks(3) {
        let sentence = chunk[0];
        let order = chunk[1].strip_prefix("# order: ").expect("order line");
        let score_line = chunk[2].strip_prefix("# score: ").expect("score line");
        score_line.parse::<f64>().unwrap();
        let seq = parse_trace(order).unwrap();
        if let Ok((tokens, _)) = restore(&seq, &EOL_MARK.to_string(), &EOR_MARK.to_string()) {
            assert_eq!(tokens.join(" "), sentence, "order line must replay to the sentence");
        }
    }
    // per-sentence parallelism keeps output order and bytes
    let threaded = run(slm()
        .arg("decode")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--emit-order")
        .arg("--threads")
        .arg("3")
        .arg(&input));
    assert_eq!(text, stdout(&threaded));
}

#[test]
fn forced_start_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = micro_checkpoint(dir.path(), 2);
    let input = write(dir.path(), "in.txt", "w03 w04\nw05 w06 w07\n");
    let out = run(slm()
        .arg("decode")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--start")
        .arg("w09")
        .arg(&input));
    assert!(out.status.success());
    for line in stdout(&out).lines() {
        assert!(line.split_whitespace().any(|t| t == "w09"), "{line}");
    }
    // unknown forced token: per-line error records, not an abort
    let out = run(slm()
        .arg("decode")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--start")
        .arg("nope")
        .arg(&input));
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        assert!(line.starts_with("# error:"), "{line}");
    }
}

#[test]
fn evaluate_references_score_hundred() {
    let dir = tempfile::tempdir().unwrap();
    // materialize the task's test references as the candidates file
    let spec = TaskSpec {
        kind: TaskKind::Copy,
        vocab_size: 10,
        min_len: 2,
        max_len: 5,
        seed: 9,
        train_count: 60,
        dev_count: 12,
        test_count: 12,
    };
    let data = generate(&spec).unwrap();
    let refs_text: String = data
        .test
        .iter()
        .map(|p| p.tgt.join(" ") + "\n")
        .collect();
    let cands = write(dir.path(), "cands.txt", &refs_text);
    let conf = write(
        dir.path(),
        "eval.conf",
        &format!("{MICRO_CONF}candidates = {}\n", cands.display()),
    );
    let report = dir.path().join("report.csv");
    let out = run(slm()
        .arg("evaluate")
        .arg("--config")
        .arg(&conf)
        .arg("--metrics-out")
        .arg(&report));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("BLEU = 100.00"), "{}", stdout(&out));
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.starts_with("index,bleu,cand_len,ref_len\n"));
    assert_eq!(report_text.lines().count(), 1 + 12);
}

#[test]
fn config_precedence_and_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write(dir.path(), "c.conf", &format!("{MICRO_CONF}seed = 3\n"));
    let train = |seed_flag: Option<u64>, env_seed: Option<u64>, with_file: bool, tag: &str| {
        let ckpt = dir.path().join(format!("{tag}.slmc"));
        let metrics = dir.path().join(format!("{tag}.csv"));
        let mut cmd = slm();
        cmd.arg("train");
        if with_file {
            cmd.arg("--config").arg(&conf);
        } else {
            let plain = dir.path().join("plain.conf");
            std::fs::write(&plain, MICRO_CONF).unwrap();
            cmd.arg("--config").arg(&plain);
        }
        if let Some(s) = seed_flag {
            cmd.arg("--seed").arg(s.to_string());
        }
        if let Some(s) = env_seed {
            cmd.env("SLM_SEED", s.to_string());
        }
        cmd.arg("--checkpoint").arg(&ckpt).arg("--metrics-out").arg(&metrics);
        let out = run(&mut cmd);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(&ckpt).unwrap(), std::fs::read(&metrics).unwrap())
    };
    // flag beats file
    let flag_over_file = train(Some(7), None, true, "flag");
    let plain7 = train(Some(7), None, false, "plain7");
    assert_eq!(flag_over_file, plain7);
    // file beats env
    let file_over_env = train(None, Some(99), true, "fileenv");
    let plain3 = train(Some(3), None, false, "plain3");
    assert_eq!(file_over_env, plain3);
    // env beats built-in default
    let env_only = train(None, Some(7), false, "envonly");
    assert_eq!(env_only, plain7);
    // steps flag reflected in execution
    let out = run(slm()
        .arg("train")
        .arg("--config")
        .arg(&conf)
        .arg("--steps")
        .arg("9")
        .arg("--checkpoint")
        .arg(dir.path().join("s9.slmc"))
        .arg("--metrics-out")
        .arg(dir.path().join("s9.csv")));
    assert!(stdout(&out).contains("trained 9 steps"));
}

#[test]
fn data_fraction_subsets_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write(dir.path(), "c.conf", MICRO_CONF);
    let out = run(slm()
        .arg("train")
        .arg("--config")
        .arg(&conf)
        .arg("--data-fraction")
        .arg("0.25")
        .arg("--checkpoint")
        .arg(dir.path().join("f.slmc"))
        .arg("--metrics-out")
        .arg(dir.path().join("f.csv")));
    assert!(out.status.success());
    // ceil(0.25 * 60) = 15
    assert!(
        stdout(&out).contains("training pairs: 15 of 60"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn strategies_produce_different_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write(dir.path(), "c.conf", MICRO_CONF);
    let run_strategy = |name: &str| {
        let metrics = dir.path().join(format!("{name}.csv"));
        let out = run(slm()
            .arg("train")
            .arg("--config")
            .arg(&conf)
            .arg("--seed")
            .arg("4")
            .arg("--strategy")
            .arg(name)
            .arg("--checkpoint")
            .arg(dir.path().join(format!("{name}.slmc")))
            .arg("--metrics-out")
            .arg(&metrics));
        assert!(out.status.success());
        std::fs::read_to_string(&metrics).unwrap()
    };
    let l2r = run_strategy("l2r");
    let random = run_strategy("slm-random");
    assert_ne!(l2r, random);
    for text in [&l2r, &random] {
        assert!(text.starts_with("step,phase,train_loss,dev_bleu\n"));
    }
    assert!(l2r.lines().nth(1).unwrap().contains(",l2r,"));
    assert!(random.lines().nth(1).unwrap().contains(",stage1,"));
}

#[test]
fn rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write(dir.path(), "c.conf", MICRO_CONF);
    let go = |tag: &str| {
        let ckpt = dir.path().join(format!("{tag}.slmc"));
        let metrics = dir.path().join(format!("{tag}.csv"));
        let out = run(slm()
            .arg("train")
            .arg("--config")
            .arg(&conf)
            .arg("--seed")
            .arg("11")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--metrics-out")
            .arg(&metrics));
        assert!(out.status.success());
        (std::fs::read(&ckpt).unwrap(), std::fs::read(&metrics).unwrap())
    };
    let a = go("a");
    let b = go("b");
    assert_eq!(a.0, b.0, "checkpoints differ across reruns");
    assert_eq!(a.1, b.1, "metrics differ across reruns");
}

#[test]
fn attn_dump_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = micro_checkpoint(dir.path(), 3);
    let input = write(dir.path(), "in.txt", "w03 w04 w05\n");
    let conf = write(dir.path(), "c.conf", &format!("{MICRO_CONF}attn-threshold = 0.0\n"));
    let csv_path = dir.path().join("attn.csv");
    let out = run(slm()
        .arg("attn-dump")
        .arg("--config")
        .arg(&conf)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--metrics-out")
        .arg(&csv_path)
        .arg(&input));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "src_token,tgt_vocab_token,alpha");
    // threshold 0 keeps every (source position, vocab token) pair:
    // 3 positions x 13 vocab rows
    assert_eq!(lines.len(), 1 + 3 * 13);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 3);
        let a: f64 = cols[2].parse().unwrap();
        assert!(a > 0.0 && a <= 1.0);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // unknown config key: 2
    let bad = write(dir.path(), "bad.conf", "no-such-knob = 1\n");
    let out = run(slm().arg("train").arg("--config").arg(&bad));
    assert_eq!(out.status.code(), Some(2));
    // missing checkpoint: 3
    let input = write(dir.path(), "in.txt", "w03\n");
    let out = run(slm()
        .arg("decode")
        .arg("--checkpoint")
        .arg(dir.path().join("missing.slmc"))
        .arg(&input));
    assert_eq!(out.status.code(), Some(3));
    // numeric blowup: 4
    let hot = write(dir.path(), "hot.conf", &format!("{MICRO_CONF}lr = 1e18\n"));
    let out = run(slm()
        .arg("train")
        .arg("--config")
        .arg(&hot)
        .arg("--steps")
        .arg("30")
        .arg("--checkpoint")
        .arg(dir.path().join("y.slmc"))
        .arg("--metrics-out")
        .arg(dir.path().join("y.csv")));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
