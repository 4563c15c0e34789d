use std::fs;
use std::path::Path;

use invlab::ablation::{read_summary, Cell, SUMMARY_FILE};
use invlab::cli;
use invlab::config::RunConfig;
use invlab::export::{read_latents_csv, read_metric_csv};
use invlab::run::{evaluate_run, read_report, read_sampling_log, METRICS_FILE};

const TINY: &str = r#"
[method]
name = "IBIT-REx"

[network]
latent_dim = 4
encoder_hidden = [8]
model_hidden = [8]
actor_hidden = [8]
critic_hidden = [8]

[sac]
batch_size = 8

[run]
seeds = [3]
total_steps = 240
init_steps = 60
resample_rate = 20
eval_every = 80
eval_episodes = 3
replay_capacity = 500
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("c.toml");
    fs::write(&p, text).unwrap();
    p
}

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("invlab").chain(args.iter().copied()).map(String::from).collect()
}

fn run(args: &[&str]) -> u8 {
    cli::run(argv(args))
}

#[test]
fn train_writes_a_self_contained_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap(), "--seed", "0", "--out", out.to_str().unwrap()]), 0);
    for f in ["config.toml", "metrics.csv", "sampling_log.csv", "checkpoint.bin", "checkpoint.json", "eval_report.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let snap = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(snap.run.seeds, vec![0]);

    let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(lines[0].starts_with("step,env_tags,episode_return_seen,episode_return_unseen"));
    assert_eq!(lines.len(), 1 + 3);

    // Held-out domain (id 5) never drawn for training.
    let log = read_sampling_log(&out).unwrap();
    assert!(!log.is_empty());
    assert!(log.iter().all(|(_, ids)| ids.len() == 5 && ids.iter().all(|&d| d < 5)));

    let report = read_report(&out).unwrap();
    assert_eq!(report.domains.len(), 6);
    assert!(!report.domains[5].trained_on);
    assert_eq!(report.domains[5].returns.len(), 3);
    assert_eq!(evaluate_run(&out).unwrap(), report);
    assert_eq!(run(&["eval", "--run", out.to_str().unwrap(), "--out", tmp.path().join("r.json").to_str().unwrap()]), 0);
    assert_eq!(fs::read_to_string(tmp.path().join("r.json")).unwrap(), fs::read_to_string(out.join("eval_report.json")).unwrap());

    let latents = tmp.path().join("latents.csv");
    let obs = tmp.path().join("obs.csv");
    let args = ["export-latents", "--run", out.to_str().unwrap(), "--out", latents.to_str().unwrap()];
    assert_eq!(run(&[&args[..], &["--observations", obs.to_str().unwrap()]].concat()), 0);
    let rows = read_latents_csv(&latents).unwrap();
    assert_eq!(rows.len(), 25 * 6);
    assert!(rows.iter().all(|r| r.latent.len() == 4 && r.value.is_finite()));
    assert_eq!(fs::read_to_string(&obs).unwrap().lines().count(), 1 + 25 * 6);

    // Refuses to overwrite a finished run.
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap(), "--seed", "0", "--out", out.to_str().unwrap()]), 1);
}

#[test]
fn identical_config_and_seed_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let a = invlab::run::train(&cfg, 1, &tmp.path().join("a")).unwrap();
    let b = invlab::run::train(&cfg, 1, &tmp.path().join("b")).unwrap();
    let read = |d: &Path| fs::read(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(&a.dir), read(&b.dir));
    assert_eq!(fs::read(a.dir.join("checkpoint.bin")).unwrap(), fs::read(b.dir.join("checkpoint.bin")).unwrap());
    let c = invlab::run::train(&cfg, 2, &tmp.path().join("c")).unwrap();
    assert_ne!(read(&a.dir), read(&c.dir));
}

#[test]
fn metric_command_writes_a_symmetric_table() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["metric", "--task", "grid5", "--out", tmp.path().to_str().unwrap()]), 0);
    let entries = read_metric_csv(&tmp.path().join("metric.csv")).unwrap();
    assert_eq!(entries.len(), 25 * 25);
    let get = |i: usize, j: usize| entries[i * 25 + j].2;
    for &(i, j, d) in &entries {
        assert_eq!(d, get(j, i));
        assert!(d >= 0.0);
        if i == j {
            assert_eq!(d, 0.0);
        }
    }
    let partition = fs::read_to_string(tmp.path().join("partition.csv")).unwrap();
    assert_eq!(partition.lines().count(), 26);
}

#[test]
fn malformed_input_maps_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "[method]\nname = \"DrQ\"\npost_rendering = false\n");
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()]), 1);
    let typo = write_config(tmp.path(), "[run]\ntotal_step = 5\n");
    assert_eq!(run(&["train", "--config", typo.to_str().unwrap()]), 1);
    assert_eq!(run(&["train", "--config", tmp.path().join("missing.toml").to_str().unwrap()]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["metric", "--task", "maze"]), 1);
    assert_eq!(run(&["metric", "--task", "grid5", "--c", "1.5"]), 1);
    // A directory without a run is a runtime failure.
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    fs::write(empty.join("config.toml"), "").unwrap();
    assert_eq!(run(&["eval", "--run", empty.to_str().unwrap()]), 2);
}

#[test]
fn ablation_emits_one_row_per_cell_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = TINY.replace("total_steps = 240", "total_steps = 80").replace("eval_every = 80", "eval_every = 40");
    text = text.replace("seeds = [3]", "seeds = [0, 1]");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("abl");
    assert_eq!(run(&["ablate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]), 0);
    let rows = read_summary(&out.join(SUMMARY_FILE)).unwrap();
    assert_eq!(rows.len(), Cell::matrix().len() * 2);
    for (k, cell) in Cell::matrix().iter().enumerate() {
        for (s, row) in rows[2 * k..2 * k + 2].iter().enumerate() {
            assert_eq!((row.method.as_str(), row.ri, row.pri, row.seed), (cell.method.name(), cell.rendering, cell.post_rendering, s as u64));
        }
    }
    // A second invocation reuses the finished runs.
    let before = fs::metadata(out.join("ibit-ri1-pri1_seed0").join("checkpoint.bin")).unwrap().modified().unwrap();
    assert_eq!(run(&["ablate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let after = fs::metadata(out.join("ibit-ri1-pri1_seed0").join("checkpoint.bin")).unwrap().modified().unwrap();
    assert_eq!(before, after);
    assert_eq!(read_summary(&out.join(SUMMARY_FILE)).unwrap(), rows);
}
