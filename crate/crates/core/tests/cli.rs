use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--synthetic-train", "60", "--synthetic-test", "16", "--validation-size", "8",
    "--hidden", "8", "--ff", "16", "--layers", "1",
];

fn bat(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bat"))
        .args(args)
        .current_dir(dir)
        .env_remove("BAT_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = bat(args, dir);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn help_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["build-vocab", "prepare", "train", "eval", "sweep", "plot", "attack-demo"] {
        let text = ok(&[sub, "--help"], dir.path());
        assert!(text.contains("Usage"), "{sub}");
    }
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = bat(&["train", "--no-such-flag"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn baseline_train_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &with_small(&["train", "--task", "ae", "--epochs", "4", "--dropout", "0.1", "--epsilon", "0", "-o", "run"]),
        dir.path(),
    );
    let csv = std::fs::read_to_string(dir.path().join("run/results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_id,task,dataset,epochs,dropout,epsilon,seed,split,metric,value"
    );
    assert!(lines.any(|l| l.contains(",4,0.1,0,1,test,f1,")));
    assert!(dir.path().join("run/model-seed1.ckpt").is_file());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "# settings\ntask = asc\nepochs = 3\nseeds = 2\n").unwrap();
    ok(&with_small(&["train", "--config", "run.conf", "--epochs", "1", "-o", "out"]), dir.path());
    let csv = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(rows.iter().all(|r| r.starts_with("asc-") && r.contains(",1,0.1,0,2,")));

    std::fs::write(dir.path().join("bad.conf"), "colour = blue\n").unwrap();
    let out = bat(&["train", "--config", "bad.conf"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn attack_demo_prints_unit_norms() {
    let dir = tempfile::tempdir().unwrap();
    for task in ["ae", "asc"] {
        let text = ok(&with_small(&["attack-demo", "--task", task, "--epsilon", "1.0"]), dir.path());
        let norms: Vec<f64> = text
            .lines()
            .filter_map(|l| l.split("|r_adv| = ").nth(1))
            .map(|rest| rest.split_whitespace().next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(norms.len(), 4, "{text}");
        for n in norms {
            assert!((n - 1.0).abs() <= 1e-5, "{n}");
        }
    }
}

#[test]
fn sweep_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(
        &with_small(&[
            "sweep", "--task", "asc", "--epsilons", "0.01,0.1,1.0,2.0,5.0", "--epoch-range", "1-2",
            "--table-epochs", "2", "--seeds", "1,2", "-o", "sw",
        ]),
        dir.path(),
    );
    assert!(text.contains("BAT (eps=5)"));
    let table = std::fs::read_to_string(dir.path().join("sw/table.csv")).unwrap();
    let methods: Vec<&str> = table
        .lines()
        .skip(1)
        .filter(|l| l.contains(",Acc,"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        methods,
        ["Baseline", "BAT (eps=0.01)", "BAT (eps=0.1)", "BAT (eps=1)", "BAT (eps=2)", "BAT (eps=5)"]
    );
    let listed = ok(&["plot", "sw/sweep.csv", "-o", "plots"], dir.path());
    assert!(listed.contains("synthetic-asc-epsilon.svg"));
    assert!(dir.path().join("plots/synthetic-asc-epsilon.svg").is_file());
}

#[test]
fn prepare_train_eval_from_xml() {
    let dir = tempfile::tempdir().unwrap();
    let train = fixture("restaurants_2014.xml");
    let test = fixture("laptop_2014.xml");
    let (train, test) = (train.to_str().unwrap(), test.to_str().unwrap());
    ok(
        &["prepare", "--task", "asc", "--train-file", train, "--test-file", test, "--max-len", "256", "-o", "prep"],
        dir.path(),
    );
    for f in ["vocab.txt", "asc-train.jsonl", "asc-test.jsonl"] {
        assert!(dir.path().join("prep").join(f).is_file(), "{f}");
    }
    ok(
        &[
            "train", "--task", "asc", "--train-file", "prep/asc-train.jsonl", "--test-file", "prep/asc-test.jsonl",
            "--vocab", "prep/vocab.txt", "--validation-size", "2", "--epochs", "1", "--max-len", "256",
            "--hidden", "8", "--ff", "16", "--layers", "1", "-o", "run",
        ],
        dir.path(),
    );
    let report = ok(
        &["eval", "--checkpoint", "run/model-seed1.ckpt", "--vocab", "run/vocab.txt", "--test-file", "prep/asc-test.jsonl"],
        dir.path(),
    );
    assert!(report.contains("examples: 11"), "{report}");
}

#[test]
fn official_dataset_needs_a_data_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = bat(&["train", "--dataset", "laptop"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("BAT_DATA_DIR"));
}

#[test]
fn build_vocab_from_xml_and_text() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("extra.txt"), "the keyboard is quiet\n\nfast boot\n").unwrap();
    let xml = fixture("laptop_2014.xml");
    let text = ok(&["build-vocab", xml.to_str().unwrap(), "extra.txt", "--size", "300", "-o", "v.txt"], dir.path());
    assert!(text.contains("from 10 sentences"), "{text}");
    let vocab = std::fs::read_to_string(dir.path().join("v.txt")).unwrap();
    assert!(vocab.lines().any(|l| l == "[CLS]"));
}
