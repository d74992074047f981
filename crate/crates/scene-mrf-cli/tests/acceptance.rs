//! Acceptance gate for the whole workspace.
//!
//! Ten end-to-end criteria: exact tree inference, gradient correctness
//! against two independent references, MAP solver agreement, constrained
//! refinement quality, encoding identities and overlap ranking, the
//! uniform-model loss identity, trained-model behavior (query-size trend,
//! ablation direction, cycle generalization), and byte-level reproducibility
//! of the data/train commands.  Every tolerance is pinned here; each test
//! prints one `ACCEPTANCE <n> ...: PASS` line with its measured margin.
//!
//! Criteria 7-9 share one trained benchmark fixture (about five minutes of
//! CPU); everything else runs in seconds.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene_mrf::autodiff::{backward, Tape, Tensor};
use scene_mrf::bp::{nll_of_assignment, run_bp};
use scene_mrf::graph::{
    build_scene_mrf, energy_of_assignment, Assignment, BoxXYWH, QueryEdge, QueryGraph, QueryNode,
};
use scene_mrf::map::{
    brute_force_map, brute_force_marginals, brute_force_pair_marginal, constrained_refine_mcmc,
    mplp_map, tree_map, MplpOptions,
};
use scene_mrf::model::{grounding_loss, EnergyModelParams, ModelDims};
use scene_mrf::oracle::{decode_on_grid, random_tree_mrf};
use scene_mrf::posenc::{
    encode_box, envelope_factors, make_frequency_set, overlap_score, shift_encoding,
};
use scene_mrf::util::spearman;
use scene_mrf::world::{generate_scene, make_item, WorldConfig};

// --- pinned tolerances and sizes --------------------------------------------

const C1_TREES: usize = 500;
const C1_TOL: f64 = 1e-9;
const C1_LIMIT_S: f64 = 30.0;
const C2_INSTANCES: usize = 100;
const C2_REL_TOL: f64 = 1e-5;
const C2_LIMIT_S: f64 = 60.0;
const C3_TREES: usize = 500;
const C3_LIMIT_S: f64 = 60.0;
const C4_TRIALS: usize = 100;
const C4_MIN_HITS: usize = 95;
const C4_LIMIT_S: f64 = 60.0;
const C5_BOXES: usize = 1000;
const C5_IDENTITY_TOL: f64 = 1e-12;
const C5_PAIRS: usize = 200;
const C5_MIN_RHO: f64 = 0.9;
const C5_LIMIT_S: f64 = 60.0;
const C6_ITEMS: usize = 50;
const C7_TRAIN_LIMIT_S: f64 = 600.0;
const C7_MIN_GAP: f64 = 0.05;
const C7_NOISE_BAND: f64 = 0.02;
const C8_MASK_MARGIN: f64 = 0.10;
const C9_TOL: f64 = 0.05;
const C9_MIN_BUCKET_ITEMS: usize = 25;

// --- harness helpers ---------------------------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_scene-mrf")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Run the CLI, panicking (with its stderr) on a nonzero exit.
fn run_cli(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().expect("spawn CLI");
    assert!(
        out.status.success(),
        "`scene-mrf {}` failed with {:?}:\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Pull one named column out of a metrics CSV, keyed by the first column.
fn csv_column(csv: &str, key_col_value: &str, column: &str) -> f64 {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().expect("csv header").split(',').collect();
    let col = header
        .iter()
        .position(|&h| h == column)
        .unwrap_or_else(|| panic!("no column {column:?} in {header:?}"));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[0] == key_col_value {
            return fields[col].parse().expect("numeric csv field");
        }
    }
    panic!("no row with key {key_col_value:?}");
}

// --- shared trained fixture (criteria 7-9) -----------------------------------

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    cyclic: PathBuf,
    ckpt: PathBuf,
    sweep_csv: String,
    train_secs: f64,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let data = dir.path().join("bench.jsonl");
        let cyclic = dir.path().join("cyclic.jsonl");
        let ckpt = dir.path().join("bench.ckpt");
        let sweep = dir.path().join("sweep.csv");
        let cfg = configs_dir();
        run_cli(&[
            "gen-data",
            "--config",
            cfg.join("benchmark_gen.cfg").to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "2024",
        ]);
        run_cli(&[
            "gen-data",
            "--config",
            cfg.join("benchmark_gen_cyclic.cfg").to_str().unwrap(),
            "--out",
            cyclic.to_str().unwrap(),
            "--seed",
            "4096",
        ]);
        let t0 = Instant::now();
        run_cli(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.join("benchmark_train.cfg").to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        let train_secs = t0.elapsed().as_secs_f64();
        let sweep_csv = run_cli(&[
            "sweep-relations",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            sweep.to_str().unwrap(),
            "--seed",
            "5",
        ]);
        Fixture {
            _dir: dir,
            data,
            cyclic,
            ckpt,
            sweep_csv,
            train_secs,
        }
    })
}

fn eval_csv(data: &Path, ckpt: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run_cli(&args)
}

// --- criterion 1: exact tree inference ---------------------------------------

#[test]
fn criterion_01_tree_bp_exactness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..C1_TREES {
        let n = rng.gen_range(1..=6);
        let nb = rng.gen_range(1..=8);
        let m = random_tree_mrf(&mut rng, n, nb, 3.0);
        let fast = run_bp(&m).expect("tree BP");
        let slow = brute_force_marginals(&m).expect("within guard");
        worst = worst.max((fast.log_partition.item() - slow.log_partition.item()).abs());
        for (a, b) in fast.marginals.iter().zip(&slow.marginals) {
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x.ln() - y.ln()).abs());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        worst < C1_TOL,
        "max log-space error {worst:.3e} exceeds {C1_TOL:.0e}"
    );
    assert!(secs < C1_LIMIT_S, "took {secs:.1}s, limit {C1_LIMIT_S}s");
    println!(
        "ACCEPTANCE 01 tree BP exactness over {C1_TREES} trees: PASS \
         (max log-space error {worst:.3e}, {secs:.2}s)"
    );
}

// --- criterion 2: gradients vs closed form and finite differences -------------

fn random_tree_query(rng: &mut ChaCha8Rng, n: usize, n_cat: usize, n_rel: usize) -> QueryGraph {
    let nodes = (1..=n)
        .map(|id| QueryNode {
            id,
            category: rng.gen_range(0..n_cat),
            is_generic: rng.gen::<f64>() < 0.15,
        })
        .collect();
    let edges = (2..=n)
        .map(|child| {
            let parent = rng.gen_range(1..child);
            let (src, dst) = if rng.gen() {
                (parent, child)
            } else {
                (child, parent)
            };
            QueryEdge {
                src,
                dst,
                relation: rng.gen_range(0..n_rel),
            }
        })
        .collect();
    QueryGraph { nodes, edges }
}

#[test]
fn criterion_02_nll_gradients() {
    let t0 = Instant::now();
    let (n_cat, n_rel, nb) = (3usize, 2usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(177);
    let mut worst_closed: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let rel_err = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);

    for _ in 0..C2_INSTANCES {
        let n = rng.gen_range(2..=4);
        let q = random_tree_query(&mut rng, n, n_cat, n_rel);
        let u_data: Vec<f64> = (0..nb * n_cat).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let p_data: Vec<f64> = (0..nb * nb * n_rel)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        let gt = Assignment {
            boxes: (0..n).map(|_| rng.gen_range(0..nb)).collect(),
        };

        let tape = Tape::new();
        let u = tape.leaf_from(&[nb, n_cat], u_data.clone()).expect("leaf");
        let p = tape
            .leaf_from(&[nb, nb, n_rel], p_data.clone())
            .expect("leaf");
        let m = build_scene_mrf(&q, &u, &p).expect("valid query");
        let nll = nll_of_assignment(&m, &gt).expect("tree");
        let grads = backward(&nll).expect("reverse pass");
        let gu = grads.wrt(&u).expect("on tape").data().to_vec();
        let gp = grads.wrt(&p).expect("on tape").data().to_vec();

        // Reference 1: indicator minus enumeration marginal, accumulated per
        // parameter slot (nodes may share a category column, edges a
        // relation slice), then compared entrywise including untouched
        // entries, which must be exactly zero.
        let reference = brute_force_marginals(&m).expect("within guard");
        let mut want_u = vec![0.0; nb * n_cat];
        for (v, node) in q.nodes.iter().enumerate() {
            if node.is_generic {
                continue;
            }
            let marg = reference.marginals[v].data();
            for b in 0..nb {
                let indicator = if gt.boxes[v] == b { 1.0 } else { 0.0 };
                want_u[b * n_cat + node.category] += indicator - marg[b];
            }
        }
        let mut want_p = vec![0.0; nb * nb * n_rel];
        for e in &q.edges {
            let j = q.node_index(e.src).expect("valid id");
            let k = q.node_index(e.dst).expect("valid id");
            let pm = brute_force_pair_marginal(&m, j, k).expect("within guard");
            for bj in 0..nb {
                for bk in 0..nb {
                    let indicator = if gt.boxes[j] == bj && gt.boxes[k] == bk {
                        1.0
                    } else {
                        0.0
                    };
                    want_p[(bj * nb + bk) * n_rel + e.relation] += indicator - pm[bj * nb + bk];
                }
            }
        }
        for (&got, &want) in gu.iter().zip(&want_u) {
            worst_closed = worst_closed.max(rel_err(got, want));
        }
        for (&got, &want) in gp.iter().zip(&want_p) {
            worst_closed = worst_closed.max(rel_err(got, want));
        }

        // Reference 2: central differences of an all-enumeration nll.
        let nll_of = |ud: &[f64], pd: &[f64]| -> f64 {
            let ut = Tensor::from_vec(&[nb, n_cat], ud.to_vec()).expect("shape");
            let pt = Tensor::from_vec(&[nb, nb, n_rel], pd.to_vec()).expect("shape");
            let mm = build_scene_mrf(&q, &ut, &pt).expect("valid");
            let logz = brute_force_marginals(&mm)
                .expect("within guard")
                .log_partition
                .item();
            energy_of_assignment(&mm, &gt).expect("valid") + logz
        };
        let h = 1e-5;
        for i in (0..u_data.len()).step_by(3) {
            let mut probe = u_data.clone();
            probe[i] = u_data[i] + h;
            let plus = nll_of(&probe, &p_data);
            probe[i] = u_data[i] - h;
            let minus = nll_of(&probe, &p_data);
            worst_fd = worst_fd.max(rel_err((plus - minus) / (2.0 * h), gu[i]));
        }
        for i in (0..p_data.len()).step_by(7) {
            let mut probe = p_data.clone();
            probe[i] = p_data[i] + h;
            let plus = nll_of(&u_data, &probe);
            probe[i] = p_data[i] - h;
            let minus = nll_of(&u_data, &probe);
            worst_fd = worst_fd.max(rel_err((plus - minus) / (2.0 * h), gp[i]));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        worst_closed < C2_REL_TOL,
        "closed-form gradient error {worst_closed:.3e} exceeds {C2_REL_TOL:.0e}"
    );
    assert!(
        worst_fd < C2_REL_TOL,
        "finite-difference gradient error {worst_fd:.3e} exceeds {C2_REL_TOL:.0e}"
    );
    assert!(secs < C2_LIMIT_S, "took {secs:.1}s, limit {C2_LIMIT_S}s");
    println!(
        "ACCEPTANCE 02 loss gradients over {C2_INSTANCES} instances: PASS \
         (closed form {worst_closed:.3e}, finite differences {worst_fd:.3e}, {secs:.2}s)"
    );
}

// --- criterion 3: MAP solver agreement on trees -------------------------------

#[test]
fn criterion_03_map_exactness_on_trees() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for i in 0..C3_TREES {
        let n = rng.gen_range(1..=6);
        let nb = rng.gen_range(1..=8);
        let m = random_tree_mrf(&mut rng, n, nb, 3.0);
        let bf = brute_force_map(&m, false).expect("within guard");
        let tm = tree_map(&m).expect("tree");
        let mp = mplp_map(&m, MplpOptions::default()).expect("runs");
        assert!(
            tm.energy == bf.energy && mp.energy == bf.energy,
            "tree {i}: energies diverge (brute {}, tree {}, message-passing {})",
            bf.energy,
            tm.energy,
            mp.energy
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < C3_LIMIT_S, "took {secs:.1}s, limit {C3_LIMIT_S}s");
    println!(
        "ACCEPTANCE 03 MAP agreement over {C3_TREES} trees: PASS \
         (exact energy equality, {secs:.2}s)"
    );
}

// --- criterion 4: constrained refinement --------------------------------------

#[test]
fn criterion_04_constrained_map_refinement() {
    let t0 = Instant::now();
    let master = 41u64;
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let mut hits = 0usize;
    for t in 0..C4_TRIALS as u64 {
        let m = random_tree_mrf(&mut rng, 4, 6, 0.75);
        let exact = brute_force_map(&m, true).expect("feasible");
        let init = Assignment {
            boxes: vec![0; m.n_vars],
        };
        let refined = constrained_refine_mcmc(&m, &init, 2000, master ^ t.wrapping_mul(0x9e37))
            .expect("runs");
        assert!(refined.assignment.is_distinct(), "trial {t}: repeated box");
        if (refined.energy - exact.energy).abs() <= 1e-9 {
            hits += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        hits >= C4_MIN_HITS,
        "distinct optimum found in only {hits}/{C4_TRIALS} trials (need {C4_MIN_HITS})"
    );
    assert!(secs < C4_LIMIT_S, "took {secs:.1}s, limit {C4_LIMIT_S}s");
    println!(
        "ACCEPTANCE 04 constrained refinement: PASS \
         ({hits}/{C4_TRIALS} distinct optima, {secs:.2}s)"
    );
}

// --- criterion 5: encoding identities and overlap ranking ----------------------

#[test]
fn criterion_05_encoding_identities_and_ranking() {
    let t0 = Instant::now();
    let f = make_frequency_set(8, 3, 40, 5005).expect("valid sizes");
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut worst: f64 = 0.0;
    for _ in 0..C5_BOXES {
        let b = BoxXYWH {
            cx: rng.gen_range(0.2..0.8),
            cy: rng.gen_range(0.2..0.8),
            w: rng.gen_range(0.02..0.5),
            h: rng.gen_range(0.02..0.5),
        };
        let (dx, dy) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        let moved = BoxXYWH {
            cx: b.cx + dx,
            cy: b.cy + dy,
            ..b
        };
        let direct = encode_box(&moved, &f).expect("encodes");
        let shifted =
            shift_encoding(&encode_box(&b, &f).expect("encodes"), dx, dy, &f).expect("same set");
        for (x, y) in direct.values.iter().zip(&shifted.values) {
            worst = worst.max((x - y).abs());
        }

        let (w2, h2) = (rng.gen_range(0.02..0.5), rng.gen_range(0.02..0.5));
        let joint = envelope_factors(b.w + w2, b.h + h2, &f).expect("valid");
        let e1 = envelope_factors(b.w, b.h, &f).expect("valid");
        let e2 = envelope_factors(w2, h2, &f).expect("valid");
        for ((j, a), c) in joint.iter().zip(&e1).zip(&e2) {
            worst = worst.max((j - a * c).abs());
        }
    }
    assert!(
        worst <= C5_IDENTITY_TOL,
        "encoding identity error {worst:.3e} exceeds {C5_IDENTITY_TOL:.0e}"
    );

    // Ranking: analytic overlap score versus the numerically integrated
    // overlap of the spatial profiles the encodings represent, on the
    // full-disc frequency set (every lattice pair within radius 6).
    let fd = make_frequency_set(6, 6, 63, 0).expect("full disc");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n_boxes = 21; // 210 pairs; the first C5_PAIRS are used
    let boxes: Vec<BoxXYWH> = (0..n_boxes)
        .map(|_| BoxXYWH {
            cx: rng.gen_range(0.25..0.75),
            cy: rng.gen_range(0.25..0.75),
            w: rng.gen_range(0.08..0.35),
            h: rng.gen_range(0.08..0.35),
        })
        .collect();
    let encs: Vec<_> = boxes
        .iter()
        .map(|b| encode_box(b, &fd).expect("encodes"))
        .collect();
    let res = 128usize;
    let grids: Vec<Vec<f64>> = encs.iter().map(|e| decode_on_grid(e, &fd, res)).collect();
    let mut analytic = Vec::new();
    let mut integrated = Vec::new();
    'pairs: for i in 0..n_boxes {
        for j in (i + 1)..n_boxes {
            analytic.push(overlap_score(&encs[i], &encs[j]).expect("same set"));
            let dot: f64 = grids[i].iter().zip(&grids[j]).map(|(a, b)| a * b).sum();
            integrated.push(dot / (res * res) as f64);
            if analytic.len() == C5_PAIRS {
                break 'pairs;
            }
        }
    }
    let rho = spearman(&analytic, &integrated).expect("non-constant");
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        rho > C5_MIN_RHO,
        "overlap ranking correlation {rho:.4} not above {C5_MIN_RHO}"
    );
    assert!(secs < C5_LIMIT_S, "took {secs:.1}s, limit {C5_LIMIT_S}s");
    println!(
        "ACCEPTANCE 05 encoding identities and ranking: PASS \
         (identity error {worst:.3e} on {C5_BOXES} boxes, Spearman {rho:.4} \
         over {C5_PAIRS} pairs, {secs:.2}s)"
    );
}

// --- criterion 6: uniform-model loss identity ----------------------------------

#[test]
fn criterion_06_uniform_model_identity() {
    let wc = WorldConfig::default();
    let f = make_frequency_set(8, 3, 40, 99).expect("valid sizes");
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut checked = 0;
    let mut idx = 0u64;
    while checked < C6_ITEMS {
        idx += 1;
        let Ok(scene) = generate_scene(&wc, idx) else {
            continue;
        };
        let n_nodes = rng.gen_range(2..=5usize.min(scene.objects.len()));
        let Ok(item) = make_item(&scene, &wc, n_nodes, n_nodes - 1, false, idx ^ 0xABCD) else {
            continue;
        };
        let dims = ModelDims {
            raw_feat: item.candidates.feature_dim(),
            n_freq_pairs: f.len(),
            hidden: 8,
            n_objects: wc.n_categories,
            n_relations: 6,
            max_pairwise_boxes: 64,
        };
        let zero = EnergyModelParams::zeros(dims);
        let eval = grounding_loss(&zero, &item.candidates, &item.query, &item.gt, &f, 7)
            .expect("evaluates");
        let loss = eval.loss.item();
        let n = item.query.nodes.len() as f64;
        let nb = item.candidates.n_boxes() as f64;
        let expected = n * nb.ln();
        assert!(
            loss == expected,
            "item {checked}: zero-parameter loss {loss:.17e} is not exactly \
             N ln N_b = {expected:.17e}"
        );
        checked += 1;
    }
    println!(
        "ACCEPTANCE 06 uniform-model identity: PASS \
         (loss == N ln N_b bit-exactly on {C6_ITEMS} items)"
    );
}

// --- criterion 7: query-size trend after training ------------------------------

#[test]
fn criterion_07_training_and_query_size_trend() {
    let fx = fixture();
    assert!(
        fx.train_secs < C7_TRAIN_LIMIT_S,
        "training took {:.0}s, limit {C7_TRAIN_LIMIT_S}s",
        fx.train_secs
    );

    // Pool hits over the >= 3 relation buckets and compare with bucket 1.
    let mut lines = fx.sweep_csv.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let idx = |name: &str| header.iter().position(|&h| h == name).expect("column");
    let (xi, ni, hi) = (idx("x"), idx("n_nodes"), idx("hits_at_1"));
    let mut r1 = None;
    let (mut hi_hits, mut hi_nodes) = (0usize, 0usize);
    let mut removal = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let x: usize = f[xi].parse().expect("x");
        let nodes: usize = f[ni].parse().expect("nodes");
        let hits: usize = f[hi].parse().expect("hits");
        match f[0] {
            "bucket" if x == 1 => r1 = Some(hits as f64 / nodes as f64),
            "bucket" if x >= 3 => {
                hi_hits += hits;
                hi_nodes += nodes;
            }
            "removal" => removal.push((x, hits as f64 / nodes as f64)),
            _ => {}
        }
    }
    let r1 = r1.expect("bucket 1 present");
    assert!(hi_nodes > 0, "no buckets with >= 3 relations");
    let r_hi = hi_hits as f64 / hi_nodes as f64;
    let gap = r_hi - r1;
    assert!(
        gap >= C7_MIN_GAP,
        "recall@1 gap between >=3 and =1 relations is {:.1} points, need >= {:.0}",
        gap * 100.0,
        C7_MIN_GAP * 100.0
    );

    removal.sort_by_key(|&(x, _)| x);
    for pair in removal.windows(2) {
        let ((ka, ra), (kb, rb)) = (pair[0], pair[1]);
        assert!(
            rb <= ra + C7_NOISE_BAND,
            "edge-removal recall rose from {ra:.4} (k={ka}) to {rb:.4} (k={kb})"
        );
    }
    println!(
        "ACCEPTANCE 07 query-size trend: PASS \
         (recall@1 {:.3} at >=3 rels vs {:.3} at 1 rel, gap {:.1} points; \
         removal curve non-increasing over {} steps; trained in {:.0}s)",
        r_hi,
        r1,
        gap * 100.0,
        removal.len(),
        fx.train_secs
    );
}

// --- criterion 8: ablation directions ------------------------------------------

#[test]
fn criterion_08_ablation_directions() {
    let fx = fixture();
    let full = csv_column(&eval_csv(&fx.data, &fx.ckpt, &[]), "all", "recall_at_1");
    let no_rels = csv_column(
        &eval_csv(&fx.data, &fx.ckpt, &["--no-rels"]),
        "all",
        "recall_at_1",
    );
    assert!(
        full > no_rels,
        "relations do not help: full {full:.4} <= edgeless {no_rels:.4}"
    );

    let masked = csv_column(
        &eval_csv(&fx.data, &fx.ckpt, &["--mask-node"]),
        "all",
        "recall_at_1",
    );
    let items = scene_mrf::dataset::read_items(&fx.data).expect("readable");
    let chance: f64 = items
        .iter()
        .map(|i| 1.0 / i.candidates.n_boxes() as f64)
        .sum::<f64>()
        / items.len() as f64;
    assert!(
        masked >= chance + C8_MASK_MARGIN,
        "masked-node recall {masked:.4} not {C8_MASK_MARGIN} above chance {chance:.4}"
    );
    println!(
        "ACCEPTANCE 08 ablation directions: PASS \
         (full {full:.3} > edgeless {no_rels:.3}; masked node {masked:.3} vs \
         chance {chance:.3})"
    );
}

// --- criterion 9: cycle generalization ------------------------------------------

#[test]
fn criterion_09_cycle_generalization() {
    let fx = fixture();
    let trees = eval_csv(&fx.cyclic, &fx.ckpt, &["--trees-only"]);
    let loops = eval_csv(&fx.cyclic, &fx.ckpt, &["--loops-only"]);

    let parse_buckets = |csv: &str| -> Vec<(usize, usize, f64)> {
        let mut lines = csv.lines();
        let header: Vec<&str> = lines.next().expect("header").split(',').collect();
        let idx = |name: &str| header.iter().position(|&h| h == name).expect("column");
        let (ii, ri) = (idx("n_items"), idx("recall_at_1"));
        lines
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bucket: usize = f[0].parse().ok()?;
                Some((
                    bucket,
                    f[ii].parse().expect("items"),
                    f[ri].parse().expect("recall"),
                ))
            })
            .collect()
    };
    let tree_buckets = parse_buckets(&trees);
    let loop_buckets = parse_buckets(&loops);

    let mut compared = 0;
    for &(bucket, t_items, t_recall) in &tree_buckets {
        let Some(&(_, l_items, l_recall)) = loop_buckets.iter().find(|&&(b, _, _)| b == bucket)
        else {
            continue;
        };
        if t_items < C9_MIN_BUCKET_ITEMS || l_items < C9_MIN_BUCKET_ITEMS {
            continue;
        }
        compared += 1;
        assert!(
            l_recall >= t_recall - C9_TOL,
            "bucket {bucket}: cyclic recall {l_recall:.4} more than {C9_TOL} \
             below tree recall {t_recall:.4}"
        );
        println!(
            "ACCEPTANCE 09 bucket {bucket}: loops {l_recall:.3} vs trees {t_recall:.3} \
             ({l_items}/{t_items} items)"
        );
    }
    assert!(
        compared > 0,
        "no relation bucket was populated on both sides"
    );
    println!(
        "ACCEPTANCE 09 cycle generalization: PASS \
         ({compared} matched buckets within {C9_TOL} or better)"
    );
}

// --- criterion 10: byte-level reproducibility ------------------------------------

#[test]
fn criterion_10_reproducibility() {
    let dir = tempfile::tempdir().expect("tempdir");
    let gen_cfg = dir.path().join("gen.cfg");
    let train_cfg = dir.path().join("train.cfg");
    std::fs::write(&gen_cfg, "n_items = 80\n").expect("write");
    std::fs::write(
        &train_cfg,
        "steps = 40\nbatch_size = 4\nfreq_total = 30\nlearning_rate = 0.001\n",
    )
    .expect("write");

    let gen = |tag: &str| -> (Vec<u8>, Vec<u8>) {
        let data = dir.path().join(format!("{tag}.jsonl"));
        run_cli(&[
            "gen-data",
            "--config",
            gen_cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "31415",
        ]);
        (
            std::fs::read(&data).expect("data"),
            std::fs::read(dir.path().join(format!("{tag}.vocab.json"))).expect("vocab"),
        )
    };
    let (data_a, vocab_a) = gen("a");
    let (data_b, vocab_b) = gen("b");
    assert!(
        data_a == data_b,
        "gen-data bytes differ across identical runs"
    );
    assert!(
        vocab_a == vocab_b,
        "vocabulary bytes differ across identical runs"
    );

    let train = |tag: &str| -> (Vec<u8>, Vec<u8>) {
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        run_cli(&[
            "train",
            "--data",
            dir.path().join("a.jsonl").to_str().unwrap(),
            "--config",
            train_cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--seed",
            "2718",
        ]);
        (
            std::fs::read(&ckpt).expect("ckpt"),
            std::fs::read(dir.path().join(format!("{tag}.loss.csv"))).expect("loss"),
        )
    };
    let (ckpt_a, loss_a) = train("t1");
    let (ckpt_b, loss_b) = train("t2");
    assert!(
        ckpt_a == ckpt_b,
        "checkpoint bytes differ across identical runs"
    );
    assert!(
        loss_a == loss_b,
        "loss log bytes differ across identical runs"
    );
    println!(
        "ACCEPTANCE 10 reproducibility: PASS \
         (gen-data and train outputs byte-identical across reruns)"
    );
}
