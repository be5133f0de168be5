use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tnsynth::io::{load_network, load_tensor, save_network, save_tensor, Report};
use tnsynth::network::full_set;
use tnsynth::search::{generate_synthetic, synthesize};
use tnsynth::{Index, Partition, Tensor};

fn tnsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnsynth"))
        .args(args)
        .env_remove("TNSYNTH_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn generate(&self, name: &str, dims: &str, seed: u64) -> PathBuf {
        let out = self.path(name);
        let seed = seed.to_string();
        let run = tnsynth(&["generate", "--dims", dims, "--seed", &seed, "--out", p(&out)]);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
        out
    }
}

#[test]
fn help_documents_exit_codes() {
    let out = tnsynth(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for line in ["0  success", "1  semantic failure", "2  input error", "3  unsupported", "4  internal"] {
        assert!(text.contains(line), "missing '{line}' in help");
    }
    for cmd in ["search", "generate", "verify", "baseline", "reuse", "run-program"] {
        assert!(text.contains(cmd));
    }
}

#[test]
fn generate_is_deterministic_and_full_sized() {
    let w = Work::new();
    let truth = w.path("truth.json");
    let a = w.path("a.tnsr");
    let run = tnsynth(&[
        "generate", "--dims", "16,18,20,22", "--rank-min", "2", "--rank-max", "5", "--seed", "7", "--out", p(&a),
        "--truth", p(&truth),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let b = w.generate("b.tnsr", "16,18,20,22", 7);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let t = load_tensor(&a).unwrap();
    assert_eq!(t.len(), 126720);
    let truth: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&truth).unwrap()).unwrap();
    assert_eq!(truth["tensor_size"], 126720);
    for e in truth["edges"].as_array().unwrap() {
        assert!((2..=5).contains(&e["rank"].as_u64().unwrap()));
    }
    let c = w.generate("c.tnsr", "16,18,20,22", 8);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn generate_rejects_bad_rank_range() {
    let w = Work::new();
    let out = w.path("x.tnsr");
    let run = tnsynth(&["generate", "--dims", "4,5,6", "--rank-min", "5", "--rank-max", "2", "--out", p(&out)]);
    assert_eq!(code(&run), 2);
    assert!(!out.exists());
}

#[test]
fn search_then_verify() {
    let w = Work::new();
    let truth = w.path("truth.json");
    let data = w.path("d.tnsr");
    let run = tnsynth(&["generate", "--dims", "6,7,8,9", "--seed", "3", "--out", p(&data), "--truth", p(&truth)]);
    assert_eq!(code(&run), 0);
    let report = w.path("r.json");
    let net = w.path("net");
    let run = tnsynth(&["search", p(&data), "--eps", "1e-6", "--out", p(&report), "--save-network", p(&net)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));

    let r = Report::load(&report).unwrap();
    let truth: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&truth).unwrap()).unwrap();
    assert!(r.compression_ratio >= truth["compression_ratio"].as_f64().unwrap());
    assert!(r.achieved_rel_error <= 1e-6);
    assert_eq!(r.sketch_count, 63);
    assert_eq!(r.shape, vec![6, 7, 8, 9]);
    assert_eq!(r.config.as_ref().unwrap().eps, 1e-6);
    assert_eq!(r.nodes.iter().map(|n| n.size).sum::<usize>(), r.network_size);
    assert_eq!(r.nodes.len(), r.edges.len() + 1);

    let saved = load_network(&net).unwrap().network;
    assert_eq!(saved.size(), r.network_size);
    let signature: Vec<(Vec<String>, usize)> = {
        let mut v: Vec<_> = r.edges.iter().map(|e| (e.partition.clone(), e.rank)).collect();
        v.sort();
        v
    };
    let mut from_dir: Vec<(Vec<String>, usize)> = saved
        .edge_partitions()
        .into_iter()
        .map(|(part, e)| (part.names(saved.free_indices()), e.index.size()))
        .collect();
    from_dir.sort();
    assert_eq!(signature, from_dir);

    for artifact in [&report, &net] {
        let v = tnsynth(&["verify", p(&data), p(artifact)]);
        assert_eq!(code(&v), 0, "{}{}", stdout(&v), stderr(&v));
        let line = stdout(&v).lines().find(|l| l.starts_with("achieved_rel_error")).unwrap().to_string();
        let measured: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!((measured - r.achieved_rel_error).abs() <= 1e-10);
    }
}

#[test]
fn huge_budget_gives_tiny_sound_network() {
    let w = Work::new();
    let data = w.generate("d.tnsr", "5,6,7", 4);
    let report = w.path("r.json");
    let net = w.path("net");
    let run = tnsynth(&["search", p(&data), "--eps", "0.999", "--out", p(&report), "--save-network", p(&net)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let r = Report::load(&report).unwrap();
    assert!(r.edges.iter().all(|e| e.rank == 1));
    assert_eq!(code(&tnsynth(&["verify", p(&data), p(&report)])), 0);
}

#[test]
fn zeroed_factor_fails_verification() {
    let w = Work::new();
    let data = w.generate("d.tnsr", "4,5,6,3", 5);
    let net = w.path("net");
    let run = tnsynth(&["search", p(&data), "--eps", "0.01", "--save-network", p(&net)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let node = net.join("node_0.tnsr");
    let t = load_tensor(&node).unwrap();
    save_tensor(&node, &Tensor::zeros(t.indices().to_vec()).unwrap()).unwrap();
    let v = tnsynth(&["verify", p(&data), p(&net)]);
    assert_eq!(code(&v), 1);
    assert!(stdout(&v).contains("achieved_rel_error 1e0"), "{}", stdout(&v));
    assert!(stderr(&v).contains("exceeds eps"));
}

#[test]
fn verify_input_errors() {
    let w = Work::new();
    let data = w.generate("d.tnsr", "4,5,6", 6);
    let net = w.path("net");
    let report = w.path("r.json");
    assert_eq!(code(&tnsynth(&["search", p(&data), "--eps", "0.1", "--out", p(&report), "--save-network", p(&net)])), 0);

    let t = load_tensor(&data).unwrap();
    let renamed: Vec<Index> = t
        .indices()
        .iter()
        .map(|ix| Index::new(ix.id(), format!("J{}", ix.id()), ix.size()).unwrap())
        .collect();
    let other = w.path("other.tnsr");
    save_tensor(&other, &t.with_indices(renamed).unwrap()).unwrap();
    let v = tnsynth(&["verify", p(&other), p(&net)]);
    assert_eq!(code(&v), 2);
    assert!(stderr(&v).contains("do not match"));

    let bare = w.path("bare.json");
    assert_eq!(code(&tnsynth(&["search", p(&data), "--eps", "0.1", "--out", p(&bare)])), 0);
    assert_eq!(code(&tnsynth(&["verify", p(&data), p(&bare)])), 2);
    assert_eq!(code(&tnsynth(&["verify", p(&data), p(&w.path("missing"))])), 2);
}

#[test]
fn malformed_and_unsupported_inputs() {
    let w = Work::new();
    let data = w.generate("d.tnsr", "4,5,6", 7);
    let bytes = std::fs::read(&data).unwrap();
    let trunc = w.path("t.tnsr");
    std::fs::write(&trunc, &bytes[..bytes.len() - 8]).unwrap();
    let run = tnsynth(&["search", p(&trunc), "--eps", "0.1"]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("payload"));

    let matrix = w.path("m.tnsr");
    let t = load_tensor(&data).unwrap();
    let m = Tensor::new(
        vec![Index::new(0, "row", 20).unwrap(), Index::new(1, "col", 6).unwrap()],
        t.data().to_vec(),
    )
    .unwrap();
    save_tensor(&matrix, &m).unwrap();
    let run = tnsynth(&["search", p(&matrix), "--eps", "0.1"]);
    assert_eq!(code(&run), 3);
    assert!(stderr(&run).contains("tt"));
    let run = tnsynth(&["baseline", p(&matrix), "--method", "tt", "--eps", "0.1"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));

    assert_eq!(code(&tnsynth(&["search", p(&data), "--eps", "1.5"])), 2);
    assert_eq!(code(&tnsynth(&["search", p(&data), "--eps", "0.1", "--topk", "0"])), 2);
    assert_eq!(code(&tnsynth(&["baseline", p(&data), "--method", "cp", "--eps", "0.1"])), 2);
}

#[test]
fn baselines() {
    let w = Work::new();
    let dims = [5, 6, 7, 8];
    let chain: Vec<Partition> = (1..4).map(|k| Partition::new(full_set(k), 4).unwrap()).collect();
    let syn = synthesize(&dims, &chain, &[3, 4, 2], 9).unwrap();
    let data = w.path("chain.tnsr");
    save_tensor(&data, &syn.tensor).unwrap();
    for method in ["tt", "ht"] {
        let report = w.path(&format!("{method}.json"));
        let net = w.path(method);
        let run = tnsynth(&["baseline", p(&data), "--method", method, "--eps", "1e-8", "--out", p(&report), "--save-network", p(&net)]);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
        let r = Report::load(&report).unwrap();
        assert_eq!(r.method, method);
        if method == "tt" {
            assert!((r.compression_ratio - syn.ratio()).abs() <= 1e-9 * syn.ratio());
        }
        assert_eq!(code(&tnsynth(&["verify", p(&data), p(&report)])), 0);
    }
}

#[test]
fn reuse_topology() {
    let w = Work::new();
    let dims = [6, 7, 8, 9];
    let train = generate_synthetic(&dims, (2, 4), 10).unwrap();
    let ranks: Vec<usize> = train
        .program
        .exprs()
        .iter()
        .map(|e| match e.rank {
            tnsynth::dsl::Rank::Fixed(r) => r,
            tnsynth::dsl::Rank::Hole(_) => unreachable!(),
        })
        .collect();
    let data = w.path("train.tnsr");
    save_tensor(&data, &train.tensor).unwrap();
    let report = w.path("train.json");
    assert_eq!(code(&tnsynth(&["search", p(&data), "--eps", "1e-6", "--out", p(&report)])), 0);
    let trained = Report::load(&report).unwrap();

    let again = w.path("again.json");
    let run = tnsynth(&["reuse", p(&data), "--sketch-from", p(&report), "--eps", "1e-6", "--out", p(&again)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let again = Report::load(&again).unwrap();
    assert_eq!(again.network_size, trained.network_size);
    assert_eq!(again.edges, trained.edges);

    let sib = synthesize(&dims, &train.program.partitions(), &ranks, 11).unwrap();
    let sib_path = w.path("sib.tnsr");
    save_tensor(&sib_path, &sib.tensor).unwrap();
    let out = w.path("sib.json");
    let net = w.path("sibnet");
    let run = tnsynth(&[
        "reuse", p(&sib_path), "--sketch-from", p(&report), "--eps", "1e-6", "--out", p(&out), "--save-network", p(&net),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let r = Report::load(&out).unwrap();
    assert!(r.compression_ratio >= 0.9 * trained.compression_ratio);
    assert_eq!(code(&tnsynth(&["verify", p(&sib_path), p(&out)])), 0);

    let t = load_tensor(&sib_path).unwrap();
    let renamed: Vec<Index> = t
        .indices()
        .iter()
        .map(|ix| Index::new(ix.id(), format!("K{}", ix.id()), ix.size()).unwrap())
        .collect();
    let stranger = w.path("stranger.tnsr");
    save_tensor(&stranger, &t.with_indices(renamed).unwrap()).unwrap();
    let run = tnsynth(&["reuse", p(&stranger), "--sketch-from", p(&report), "--eps", "1e-6"]);
    assert_eq!(code(&run), 2, "{}", stderr(&run));
}

#[test]
fn run_program() {
    let w = Work::new();
    let data = w.generate("d.tnsr", "3,4,5,6", 12);
    let bridge = w.path("bridge.txt");
    std::fs::write(&bridge, "# four-node tree\nosplit {I1} rank=100\nosplit {I1,I2} rank=100\nosplit {I2} rank=100\n").unwrap();
    let report = w.path("r.json");
    let net = w.path("net");
    let run = tnsynth(&["run-program", p(&data), p(&bridge), "--eps", "0.1", "--out", p(&report), "--save-network", p(&net)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let r = Report::load(&report).unwrap();
    let mut parts: Vec<Vec<String>> = r.edges.iter().map(|e| e.partition.clone()).collect();
    parts.sort();
    assert_eq!(parts, vec![vec!["I1".to_string()], vec!["I1".into(), "I2".into()], vec!["I2".into()]]);
    assert_eq!(r.nodes.len(), 4);
    assert_eq!(code(&tnsynth(&["verify", p(&data), p(&report)])), 0);

    let crossing = w.path("cross.txt");
    std::fs::write(&crossing, "osplit {I1,I2} rank=100\nosplit {I1,I3} rank=100\n").unwrap();
    let run = tnsynth(&["run-program", p(&data), p(&crossing), "--eps", "0.1"]);
    assert_eq!(code(&run), 1);
    assert!(stderr(&run).contains("expression 1"), "{}", stderr(&run));

    let tight = w.path("tight.txt");
    std::fs::write(&tight, "osplit {I1} rank=1\n").unwrap();
    let run = tnsynth(&["run-program", p(&data), p(&tight), "--eps", "1e-9"]);
    assert_eq!(code(&run), 1);
    assert!(stderr(&run).contains("expression 0"));

    let empty = w.path("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let out = w.path("e.json");
    let run = tnsynth(&["run-program", p(&data), p(&empty), "--eps", "0.1", "--out", p(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let r = Report::load(&out).unwrap();
    assert_eq!(r.nodes.len(), 1);
    assert_eq!(r.achieved_rel_error, 0.0);
    assert_eq!(r.compression_ratio, 1.0);

    let garbage = w.path("garbage.txt");
    std::fs::write(&garbage, "split {I1} rank=2\n").unwrap();
    assert_eq!(code(&tnsynth(&["run-program", p(&data), p(&garbage), "--eps", "0.1"])), 2);
}

#[test]
fn thread_count_is_deterministic() {
    let w = Work::new();
    let data = w.generate("d.tnsr", "4,5,4,5,3", 13);
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_tnsynth"))
            .args(["search", p(&data), "--eps", "0.1", "--topk", "2", "--seed", "1"])
            .env("TNSYNTH_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let r: Report = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(r.config.as_ref().unwrap().threads, threads.parse::<usize>().unwrap());
        (r.edges, r.network_size, r.achieved_rel_error, r.program)
    };
    let one = run("1");
    assert_eq!(one, run("4"));
    assert_eq!(one, run("1"));
}

#[test]
fn saved_ground_truth_verifies() {
    let w = Work::new();
    let data = w.path("d.tnsr");
    let net = w.path("truth");
    let run = tnsynth(&["generate", "--dims", "5,5,5,5", "--seed", "14", "--out", p(&data), "--save-network", p(&net)]);
    assert_eq!(code(&run), 0);
    assert_eq!(code(&tnsynth(&["verify", p(&data), p(&net)])), 2);
    let v = tnsynth(&["verify", p(&data), p(&net), "--eps", "1e-9"]);
    assert_eq!(code(&v), 0, "{}", stdout(&v));
    let g = load_network(&net).unwrap().network;
    let dir2 = w.path("copy");
    save_network(&dir2, &g, Some(0.5)).unwrap();
    assert_eq!(code(&tnsynth(&["verify", p(&data), p(&dir2)])), 0);
}
