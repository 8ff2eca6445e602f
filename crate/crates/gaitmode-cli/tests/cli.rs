//! End-to-end checks of the `gaitmode` binary: output layout,
//! reproducibility, error reporting, and flag handling.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gaitmode::tcn::load_checkpoint;

fn gaitmode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaitmode"))
        .args(args)
        .output()
        .expect("spawn CLI")
}

fn expect_success(args: &[&str]) -> Output {
    let output = gaitmode(args);
    assert!(
        output.status.success(),
        "gaitmode {args:?} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

/// Sorted names of the files in `dir`.
fn file_names(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .expect("read dir")
        .map(|e| e.expect("entry").file_name().into_string().expect("utf-8"))
        .collect();
    names.sort();
    names
}

/// Byte-level snapshot of a directory, keyed by file name.
fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    file_names(dir)
        .into_iter()
        .map(|name| {
            let bytes = fs::read(dir.join(&name)).expect("read file");
            (name, bytes)
        })
        .collect()
}

const TINY_CONFIG: &str = r#"
[cohort]
n_users = 1

[tcn]
n_blocks = 2
kernel_size = 3
dilations = [1, 2]
channels = [4, 6]
target_half_width = 10
epochs = 1
batch_size = 256
"#;

#[test]
fn gen_data_writes_cohort_csvs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, format!("seed = 5\n{TINY_CONFIG}")).unwrap();
    let data = dir.path().join("data");

    expect_success(&["--config", config.to_str().unwrap(), "--out", data.to_str().unwrap(), "gen-data"]);

    let names = file_names(&data);
    let csvs: Vec<&String> = names.iter().filter(|n| n.ends_with(".csv")).collect();
    assert_eq!(csvs.len(), 6, "one user walks six sequences, found {names:?}");
    assert!(names.contains(&"manifest.txt".to_string()), "missing manifest in {names:?}");

    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert!(
        manifest.starts_with("# gaitmode "),
        "manifest lacks the provenance stamp:\n{manifest}"
    );
    assert!(manifest.contains("# config_sha256 "), "manifest lacks the config hash");
    assert!(manifest.contains("# seed 5"), "manifest lacks the seed line");
    for csv in &csvs {
        assert!(manifest.contains(csv.as_str()), "manifest does not list {csv}");
        let content = fs::read_to_string(data.join(csv.as_str())).unwrap();
        assert!(content.starts_with("# gaitmode "), "{csv} lacks the provenance stamp");
    }

    // the generated directory must round-trip as a training dataset
    let dataset = gaitmode::synth::load_dataset_dir(&data).expect("reload dataset");
    assert_eq!(dataset.sequences().len(), 6);
}

#[test]
fn equal_seeds_reproduce_identical_bytes_and_unequal_seeds_do_not() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, format!("seed = 9\n{TINY_CONFIG}")).unwrap();
    let config = config.to_str().unwrap();

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    expect_success(&["--config", config, "--out", a.to_str().unwrap(), "gen-data"]);
    expect_success(&["--config", config, "--out", b.to_str().unwrap(), "gen-data"]);
    expect_success(&["--config", config, "--seed", "10", "--out", c.to_str().unwrap(), "gen-data"]);

    assert_eq!(dir_bytes(&a), dir_bytes(&b), "same (config, seed) must be bit-identical");
    assert_ne!(
        dir_bytes(&a),
        dir_bytes(&c),
        "a different seed must change the generated data"
    );
}

#[test]
fn seed_flag_is_equivalent_to_editing_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let flag_config = dir.path().join("flag.toml");
    let edited_config = dir.path().join("edited.toml");
    fs::write(&flag_config, format!("seed = 3\n{TINY_CONFIG}")).unwrap();
    fs::write(&edited_config, format!("seed = 4\n{TINY_CONFIG}")).unwrap();

    let via_flag = dir.path().join("flag");
    let via_edit = dir.path().join("edit");
    expect_success(&[
        "--config",
        flag_config.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        via_flag.to_str().unwrap(),
        "gen-data",
    ]);
    expect_success(&[
        "--config",
        edited_config.to_str().unwrap(),
        "--out",
        via_edit.to_str().unwrap(),
        "gen-data",
    ]);
    assert_eq!(
        dir_bytes(&via_flag),
        dir_bytes(&via_edit),
        "--seed must act exactly like setting seed in the config"
    );
}

#[test]
fn train_writes_a_loadable_checkpoint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!("seed = 6\ndata_dir = \"{}\"\n{TINY_CONFIG}", data.display()),
    )
    .unwrap();
    let config = config.to_str().unwrap();

    expect_success(&["--config", config, "--out", data.to_str().unwrap(), "gen-data"]);
    expect_success(&["--config", config, "--out", out.to_str().unwrap(), "train"]);

    let model = load_checkpoint(&out.join("tcn.ckpt")).expect("checkpoint loads");
    assert_eq!(model.config().n_blocks, 2);
    assert_eq!(model.config().target_half_width, 10);
    assert_eq!(model.config().seed, 6, "network seed defaults to the global seed");

    let report = fs::read_to_string(out.join("train_report.txt")).unwrap();
    assert!(report.starts_with("# gaitmode "), "report lacks the provenance stamp");
    assert!(report.contains("epochs 1"), "report does not state the epoch count:\n{report}");
    assert!(report.contains("final_loss "), "report does not state the final loss");
}

#[test]
fn commands_needing_data_explain_the_missing_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, TINY_CONFIG).unwrap(); // no data_dir

    let output = gaitmode(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "train",
    ]);
    assert!(!output.status.success(), "train without data_dir must fail");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("data_dir"),
        "the error must point at the missing data_dir setting, got:\n{stderr}"
    );
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "[tcn]\nlayers = 3\n").unwrap();

    let output = gaitmode(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "gen-data",
    ]);
    assert!(!output.status.success(), "a config with unknown fields must be rejected");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("layers"),
        "the error must name the unknown field, got:\n{stderr}"
    );
}

#[test]
fn missing_config_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let output = gaitmode(&[
        "--config",
        dir.path().join("absent.toml").to_str().unwrap(),
        "gen-data",
    ]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("absent.toml"),
        "the error must name the missing file, got:\n{stderr}"
    );
}
