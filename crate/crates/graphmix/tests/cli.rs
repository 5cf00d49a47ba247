use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graphmix::checkpoint::Checkpoint;
use graphmix::config::RunConfig;
use graphmix::metrics;
use graphmix_core::envs::Environment;
use graphmix_core::trainer::Trainer;

const SMALL_MODEL: &str = "[model]\nagent_hidden = 8\nattn_dim = 4\ngnn_width = 8\ngin_hidden = 4\nhyper_hidden = 8\n";
const SMALL_TRAIN: &str =
    "[train]\ntotal_steps = 300\neval_period = 100\neval_episodes = 4\nbatch_size = 4\nbuffer_size = 50\ntarget_period = 5\n";

fn grid_config(dir: &Path, name: &str, n_agents: usize, extra: &str) -> PathBuf {
    let text = format!("[env]\nname = \"coop_grid\"\nn_agents = {n_agents}\n{extra}\n{SMALL_MODEL}{SMALL_TRAIN}");
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn graphmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphmix")).args(args).env_remove("GRAPHMIX_OUT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = graphmix(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let o = graphmix(args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(o.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(config: &Path, seed: u64, out: &Path) {
    ok(&["train", "--config", s(config), "--seed", &seed.to_string(), "--out", s(out), "--quiet"]);
}

#[test]
fn missing_config_names_the_path() {
    let err = fails(&["train", "--config", "/nonexistent/run.toml"]);
    assert!(err.contains("/nonexistent/run.toml"), "{err}");
}

#[test]
fn config_errors_give_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[env]\nname = \"coop_grid\"\n[train]\nlearning_rate = 1.0\n").unwrap();
    let err = fails(&["train", "--config", s(&path), "--out", s(dir.path())]);
    assert!(err.contains("learning_rate") && err.contains("line 4"), "{err}");
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(dir.path(), "run.toml", 3, "");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train(&config, 1, &a);
    train(&config, 1, &b);
    train(&config, 2, &c);
    for f in [metrics::TRAIN_CSV, metrics::EVAL_CSV, metrics::MANIFEST] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join(metrics::TRAIN_CSV)).unwrap(), fs::read(c.join(metrics::TRAIN_CSV)).unwrap());
    let train = fs::read_to_string(a.join(metrics::TRAIN_CSV)).unwrap();
    assert!(train.starts_with("episode,env_steps,loss_global,loss_local_mean,epsilon\n"));
    let evals = metrics::read_eval(&a.join(metrics::EVAL_CSV)).unwrap();
    assert_eq!(evals.first().unwrap().env_steps, 0);
    assert!(evals.last().unwrap().env_steps >= 300);
    // One checkpoint per evaluation plus the final one.
    let steps = fs::read_dir(a.join("checkpoints")).unwrap().count();
    assert_eq!(steps, evals.len());
}

#[test]
fn zero_steps_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(dir.path(), "run.toml", 3, "");
    let text = fs::read_to_string(&config).unwrap().replace("total_steps = 300", "total_steps = 0");
    fs::write(&config, text).unwrap();
    let out = dir.path().join("out");
    train(&config, 0, &out);
    let manifest = metrics::read_manifest(&out).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config"]["train"]["total_steps"], 0);
    assert_eq!(fs::read_to_string(out.join(metrics::TRAIN_CSV)).unwrap().lines().count(), 1);
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(dir.path(), "run.toml", 3, "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&config, 4, &a);
    let manifest = a.join(metrics::MANIFEST);
    let copy = dir.path().join("replay.jsonl");
    fs::copy(&manifest, &copy).unwrap();
    let seed = metrics::read_manifest(&a).unwrap()["seed"].as_u64().unwrap();
    train(&copy, seed, &b);
    assert_eq!(fs::read(a.join(metrics::TRAIN_CSV)).unwrap(), fs::read(b.join(metrics::TRAIN_CSV)).unwrap());
}

#[test]
fn out_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(dir.path(), "run.toml", 3, "");
    let out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_graphmix"))
        .args(["train", "--config", s(&config), "--quiet"])
        .env("GRAPHMIX_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join(metrics::MANIFEST).exists());
}

#[test]
fn resume_continues_from_latest_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(dir.path(), "run.toml", 3, "");
    let out = dir.path().join("out");
    train(&config, 3, &out);
    let full = fs::read_to_string(out.join(metrics::TRAIN_CSV)).unwrap();
    // Pretend the run died after its second evaluation.
    let mut steps: Vec<PathBuf> = fs::read_dir(out.join("checkpoints")).unwrap().map(|e| e.unwrap().path()).collect();
    steps.sort();
    fs::copy(&steps[1], out.join("checkpoint.gmxc")).unwrap();
    let mid = Checkpoint::load(&steps[1]).unwrap().meta;
    ok(&["train", "--config", s(&config), "--seed", "3", "--out", s(&out), "--resume", "--quiet"]);
    let resumed = fs::read_to_string(out.join(metrics::TRAIN_CSV)).unwrap();
    let episodes: Vec<u64> = resumed.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(episodes.windows(2).all(|w| w[1] == w[0] + 1), "episodes not contiguous");
    let prefix: Vec<&str> = full.lines().take(1 + mid.episodes as usize).collect();
    assert_eq!(resumed.lines().take(prefix.len()).collect::<Vec<_>>(), prefix);
    let last = Checkpoint::load(&out.join("checkpoint.gmxc")).unwrap().meta;
    assert!(last.env_steps >= 300);
    assert_eq!(fs::read_to_string(out.join(metrics::MANIFEST)).unwrap().lines().count(), 2);

    let other = grid_config(dir.path(), "other.toml", 4, "");
    let err = fails(&["train", "--config", s(&other), "--seed", "3", "--out", s(&out), "--resume"]);
    assert!(err.contains("differs"), "{err}");
}

#[test]
fn eval_matches_trainer_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(dir.path(), "run.toml", 3, "");
    let out = dir.path().join("out");
    train(&config, 5, &out);
    let ckpt = out.join("checkpoint.gmxc");
    let printed = ok(&["eval", "--checkpoint", s(&ckpt), "--config", s(&config), "--out", s(&out)]);
    let last = metrics::read_eval(&out.join(metrics::EVAL_CSV)).unwrap().pop().unwrap();
    assert!(printed.contains(&format!("success_rate {} mean_return {}", last.stats.success_rate, last.stats.mean_return)), "{printed}");

    let rc = RunConfig::load(&config).unwrap();
    let env = rc.env.build().unwrap();
    let model = rc.model_for(&env).unwrap();
    let c = Checkpoint::load(&ckpt).unwrap();
    let mut t = Trainer::with_params(model, rc.train.clone(), env, 5, c.params).unwrap();
    let stats = t.evaluate().unwrap();
    assert_eq!(stats.mean_return, last.stats.mean_return);
    let table = fs::read_to_string(out.join("evaluation.csv")).unwrap();
    assert!(table.starts_with("episodes,seed,success_rate,mean_return,mean_len\n4,5,"), "{table}");
}

#[test]
fn eval_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(dir.path(), "run.toml", 3, "");
    let out = dir.path().join("out");
    train(&config, 0, &out);
    let ckpt = out.join("checkpoint.gmxc");
    let err = fails(&["eval", "--checkpoint", s(&ckpt), "--config", s(&config), "--episodes", "0"]);
    assert!(err.contains("episodes"), "{err}");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
    let corrupt = dir.path().join("corrupt.gmxc");
    fs::write(&corrupt, &bytes).unwrap();
    let err = fails(&["eval", "--checkpoint", s(&corrupt), "--config", s(&config)]);
    assert!(err.contains("version 9"), "{err}");

    let wide = dir.path().join("wide.toml");
    fs::write(&wide, fs::read_to_string(&config).unwrap().replace("agent_hidden = 8", "agent_hidden = 9")).unwrap();
    let err = fails(&["eval", "--checkpoint", s(&ckpt), "--config", s(&wide)]);
    assert!(err.contains("`agent.fc_in.weight`"), "{err}");
}

#[test]
fn finetune_moves_to_a_larger_team() {
    let dir = tempfile::tempdir().unwrap();
    let src = grid_config(dir.path(), "m3.toml", 3, "");
    let dst = grid_config(dir.path(), "m5.toml", 5, "");
    let out = dir.path().join("m3");
    train(&src, 0, &out);
    let ckpt = out.join("checkpoint.gmxc");
    let ft = dir.path().join("ft");
    ok(&["finetune", "--checkpoint", s(&ckpt), "--config", s(&dst), "--steps", "200", "--out", s(&ft), "--quiet"]);
    let table = fs::read_to_string(ft.join("finetune.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), graphmix::run::FINETUNE_HEADER.join(","));
    assert!(lines.next().unwrap().starts_with("0,200,"));
    let tuned = Checkpoint::load(&ft.join("checkpoint.gmxc")).unwrap();
    assert_eq!(tuned.meta.n_agents, 5);
    assert_eq!(tuned.meta.model, Checkpoint::load(&ckpt).unwrap().meta.model);

    let zero = dir.path().join("zero");
    ok(&["finetune", "--checkpoint", s(&ckpt), "--config", s(&dst), "--steps", "0", "--out", s(&zero), "--quiet"]);
    let row: Vec<String> =
        fs::read_to_string(zero.join("finetune.csv")).unwrap().lines().nth(1).unwrap().split(',').map(String::from).collect();
    assert_eq!(row[2], row[3]);
    assert_eq!(row[4], row[5]);
    assert_eq!(row[6], row[7]);

    let narrow = grid_config(dir.path(), "narrow.toml", 5, "obs_ally_slots = 1");
    let err = fails(&["finetune", "--checkpoint", s(&ckpt), "--config", s(&narrow), "--steps", "0", "--out", s(&zero)]);
    assert!(err.contains("obs_dim"), "{err}");
}

#[test]
fn verify_runs_named_suites() {
    let out = ok(&["verify", "--suite", "igm", "--seed", "1"]);
    assert!(out.starts_with("PASS igm"), "{out}");
    let err = fails(&["verify", "--suite", "speed"]);
    for name in ["grad", "monotone", "igm", "masks", "vdn", "all"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn env_spec_of_config_matches_checkpoint_meta() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(dir.path(), "run.toml", 4, "");
    let out = dir.path().join("out");
    train(&config, 0, &out);
    let meta = Checkpoint::load(&out.join("checkpoint.gmxc")).unwrap().meta;
    let env = RunConfig::load(&config).unwrap().env.build().unwrap();
    assert_eq!(meta.n_agents, env.spec().n_agents);
    assert_eq!(meta.obs_dim, env.spec().obs_dim);
    assert_eq!(meta.seed, 0);
}
