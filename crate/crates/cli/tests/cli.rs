//! End-to-end runs of the binary on a small config.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
id = "smoke"
examples_per_language = 240
n_src = 60
tuning_sizes = [10]
scopes = ["full", "circuit", "near_zero"]
rules = ["directional", "magnitude"]
ps = [0.25]
max_depths = [0, 1]
seeds = [1, 2]
discovery_pool = "heldout"
n_discovery_inputs = 12
mean_set_size = 12
direct_ft = true

[model]
n_layers = 2
n_heads = 2
d_model = 8
d_mlp = 16

[task]
n_classes = 3
content_vocab = 12
cues_per_class = 2
cue_mass = 0.5
min_len = 3
max_len = 5

[source]
id = "src"

[[targets]]
id = "tgt"
permuted_fraction = 1.0
drift = 0.2
seed = 5

[pools]
discovery = 100
heldout_tuning = 40
validation = 40
test = 60

[competence]
epochs = 2
lr = 3e-3

[tuning]
epochs = 1
lr = 1e-2
"#;

fn ctsft(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ctsft")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "ctsft {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("smoke.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn sweep_is_resumable_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_string_lossy().into_owned();
    ctsft(&["sweep", "--config", &cfg, "--out", &out_s]);
    let first = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(first.starts_with("experiment_id,phase,source_lang,target_lang,scope,rule,p,depth,n,seed,metric,value\n"));
    for phase in ["competence", "faithfulness", "topology", "transfer", "direct_ft"] {
        assert!(first.contains(&format!(",{phase},")), "missing phase {phase}");
    }
    assert!(!first.contains(",failed,"));
    let outcomes = std::fs::read_to_string(out.join("seed-1/outcomes-directional-p0.25-d1.csv")).unwrap();
    assert_eq!(outcomes.lines().count(), 41);
    ctsft(&["sweep", "--config", &cfg, "--out", &out_s]);
    assert_eq!(std::fs::read_to_string(out.join("results.csv")).unwrap(), first);

    let report = stdout(&ctsft(&["report", "--results", &out.join("results.csv").to_string_lossy()]));
    assert!(report.contains("circuit") && report.contains("near_zero"));

    let stab = stdout(&ctsft(&["sweep", "--config", &cfg, "--out", &out_s, "--stability"]));
    assert_eq!(stab.lines().filter(|l| l.starts_with("seed ")).count(), 4);
}

#[test]
fn single_stage_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let work = dir.path().join("w");
    let w = work.to_string_lossy().into_owned();

    let data = dir.path().join("data");
    let listed = stdout(&ctsft(&["gen-data", "--config", &cfg, "--out", &data.to_string_lossy()]));
    assert_eq!(listed.lines().count(), 8);

    let tuned = stdout(&ctsft(&["competence-tune", "--config", &cfg, "--seed", "3", "--out", &w]));
    assert!(tuned.contains("source_accuracy"));

    let found = stdout(&ctsft(&["discover", "--config", &cfg, "--seed", "3", "--p", "0.5", "--out", &w]));
    let circuit = found.lines().find_map(|l| l.strip_prefix("circuit ")).unwrap().to_string();

    let faith = stdout(&ctsft(&["faithfulness", "--config", &cfg, "--seed", "3", "--circuit", &circuit, "--out", &w]));
    assert!(faith.contains("accuracy_faithfulness"));

    let ft = stdout(&ctsft(&[
        "ct-sft", "--config", &cfg, "--seed", "3", "--target", "tgt", "--scope", "random", "--circuit", &circuit, "--n", "10",
        "--out", &w,
    ]));
    let ckpt = ft.lines().find_map(|l| l.strip_prefix("checkpoint ")).unwrap().to_string();

    let eval = stdout(&ctsft(&["evaluate", "--checkpoint", &ckpt, "--data", &data.join("tgt.test.tsv").to_string_lossy()]));
    assert!(eval.contains("accuracy"));

    let bad = Command::new(env!("CARGO_BIN_EXE_ctsft"))
        .args(["ct-sft", "--config", &cfg, "--seed", "3", "--target", "nope", "--n", "10", "--out", &w])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
