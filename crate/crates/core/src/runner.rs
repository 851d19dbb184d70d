//! The six commands behind the CLI, as library calls.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::category::{build_split, filter_annotations, FrequencyTable, ZeroShotSplit};
use crate::config::RunConfig;
use crate::dataset::{generate_records, Dataset, Record};
use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::eval::{self, evaluate, ApReport, Band, GroundTruth, Prediction, Role, SizeBands};
use crate::exec::Exec;
use crate::geometry::{iou, BBox};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::model::{self, checkpoint, Lain};
use crate::nn::{self, AttentionVars, Init};
use crate::oracle;
use crate::scene::HoiInstance;
use crate::tensor::{kernels, Graph, ParamStore, Tensor};
use crate::train::{train, TrainOutcome};

/// Train, validation and test records plus the split they were cut with.
/// Training annotations are already filtered to seen categories.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
    pub split: ZeroShotSplit,
}

const TRAIN_FILE: &str = "train.lainds";
const VAL_FILE: &str = "val.lainds";
const TEST_FILE: &str = "test.lainds";
const SPLIT_FILE: &str = "split.txt";

/// Renders the three partitions from disjoint seed streams.
pub fn generate(cfg: &RunConfig) -> Result<(Vec<Record>, Vec<Record>, Vec<Record>)> {
    let spec = cfg.scene_spec()?;
    let det = cfg.detector();
    let seed = cfg.seed("data_seed");
    let exec = cfg.exec();
    let part = |n: usize, stream: u64| generate_records(&spec, &det, n, seed.wrapping_mul(3).wrapping_add(stream), exec);
    Ok((part(cfg.count("train_scenes"), 0)?, part(cfg.count("val_scenes"), 1)?, part(cfg.count("test_scenes"), 2)?))
}

/// Builds the split from the training frequencies and withholds unseen
/// annotations from the training partition.
pub fn make_corpus(cfg: &RunConfig, train: Vec<Record>, val: Vec<Record>, test: Vec<Record>) -> Result<Corpus> {
    let space = cfg.space()?;
    let freq = FrequencyTable::from_scenes(&space, train.iter().map(|r| &r.scene));
    let split = build_split(&space, cfg.setting(), Some(&freq), cfg.split_size(), cfg.seed("split_seed"))?;
    Ok(Corpus {
        train: withhold(train, &split),
        val,
        test,
        split,
    })
}

fn withhold(records: Vec<Record>, split: &ZeroShotSplit) -> Vec<Record> {
    let scenes: Vec<_> = records.iter().map(|r| r.scene.clone()).collect();
    records
        .into_iter()
        .zip(filter_annotations(&scenes, split))
        .map(|(mut r, s)| {
            r.scene = s;
            r
        })
        .collect()
}

pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let (train, val, test) = generate(cfg)?;
    make_corpus(cfg, train, val, test)
}

/// `<out_dir>/<unix seconds>-<first 12 digest chars>`, created.
pub fn run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let base = PathBuf::from(cfg.get("out_dir")?);
    let mut dir = base.join(format!("{secs}-{}-{command}", &cfg.digest()[..12]));
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{secs}-{}-{command}.{n}", &cfg.digest()[..12]));
        n += 1;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `gen`: the three partitions (full annotations) and the split.
pub fn cmd_gen(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let (train, val, test) = generate(cfg)?;
    let corpus = make_corpus(cfg, train.clone(), val.clone(), test.clone())?;
    let enc = cfg.pixel_encoding();
    for (name, records) in [(TRAIN_FILE, train), (VAL_FILE, val), (TEST_FILE, test)] {
        Dataset {
            digest: cfg.digest(),
            records,
        }
        .write(&dir.join(name), enc)?;
    }
    write(&dir.join(SPLIT_FILE), &corpus.split.to_text(&cfg.space()?))
}

/// Reads a `gen` directory back into a corpus.
pub fn load_corpus(cfg: &RunConfig, data: &Path) -> Result<Corpus> {
    let read = |name: &str| Dataset::read(&data.join(name)).map(|d| d.records);
    let (train, val, test) = (read(TRAIN_FILE)?, read(VAL_FILE)?, read(TEST_FILE)?);
    let split_path = data.join(SPLIT_FILE);
    let text = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let split = ZeroShotSplit::from_text(&text, &cfg.space()?)?;
    Ok(Corpus {
        train: withhold(train, &split),
        val,
        test,
        split,
    })
}

/// Trains one model on the corpus and returns it loaded with the best
/// parameters.
pub fn train_model(
    cfg: &RunConfig,
    corpus: &Corpus,
    exec: Exec,
    on_epoch: impl FnMut(&crate::train::EpochLog),
) -> Result<(Lain, TrainOutcome)> {
    let mut model = Lain::new(cfg.model(), cfg.space()?)?;
    let outcome = train(&mut model, &corpus.train, &corpus.val, &corpus.split, &cfg.train(), exec, on_epoch)?;
    model.params = outcome.best.clone();
    Ok((model, outcome))
}

pub fn cmd_train(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = cfg.path("dataset").ok_or_else(|| Error::invalid("train needs `dataset` (a gen directory)"))?;
    let corpus = load_corpus(cfg, &data)?;
    let (model, outcome) = train_model(cfg, &corpus, cfg.exec(), |e| {
        println!(
            "epoch {} loss {:.6} val mAP seen {} unseen {} ({:.1}s)",
            e.epoch,
            e.mean_loss,
            points(e.val_map_seen),
            points(e.val_map_unseen),
            e.wall_seconds
        );
    })?;
    checkpoint::save(&model, &dir.join("checkpoint.bin"))?;
    write(&dir.join("train_log.csv"), &crate::train::log_csv(&outcome.log))
}

/// mAP in points with two decimals, `n/a` when undefined.
pub fn points(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

pub fn load_model(cfg: &RunConfig, path: &Path, force: bool) -> Result<Lain> {
    let mut model = Lain::new(cfg.model(), cfg.space()?)?;
    checkpoint::load(&mut model, path, force)?;
    Ok(model)
}

pub fn cmd_eval(cfg: &RunConfig, dir: &Path, force: bool) -> Result<ApReport> {
    let data = cfg.path("dataset").ok_or_else(|| Error::invalid("eval needs `dataset` (a gen directory)"))?;
    let ckpt = cfg.path("checkpoint").ok_or_else(|| Error::invalid("eval needs `checkpoint`"))?;
    let corpus = load_corpus(cfg, &data)?;
    let model = load_model(cfg, &ckpt, force)?;
    let report = evaluate(&model, &corpus.test, &corpus.split, &cfg.eval(), &cfg.digest(), cfg.exec())?;
    write(&dir.join("report.csv"), &report.to_csv())?;
    write(&dir.join("report.json"), &report.to_json())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub use_la: bool,
    pub use_ia: bool,
    pub unseen: f64,
    pub seen: f64,
    pub full: f64,
    /// Full mAP of each seed, in points.
    pub per_seed: Vec<f64>,
}

pub const VARIANTS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

/// Trains the four adapter variants for each seed on one corpus and reports
/// the seed-mean mAP in points. Runs are distributed over `exec`.
pub fn ablate(cfg: &RunConfig, corpus: &Corpus, seeds: &[u64], exec: Exec) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(usize, u64)> = (0..VARIANTS.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results = exec.map(&jobs, |&(v, seed)| -> Result<ApReport> {
        let (la, ia) = VARIANTS[v];
        let mut c = cfg.clone();
        c.set("use_la", &la.to_string())?;
        c.set("use_ia", &ia.to_string())?;
        c.set("init_seed", &seed.to_string())?;
        c.set("train_seed", &seed.to_string())?;
        let (model, _) = train_model(&c, corpus, Exec::Sequential, |_| {})?;
        evaluate(&model, &corpus.test, &corpus.split, &c.eval(), &c.digest(), Exec::Sequential)
    });
    let mut rows = Vec::new();
    for (v, &(la, ia)) in VARIANTS.iter().enumerate() {
        let mut acc = [0.0; 3];
        let mut per_seed = Vec::new();
        for (job, r) in jobs.iter().zip(&results) {
            if job.0 != v {
                continue;
            }
            let r = r.as_ref().map_err(|e| Error::InvalidState(format!("ablation run failed: {e}")))?;
            let pts = |x: Option<f64>| 100.0 * x.unwrap_or(0.0);
            acc[0] += pts(r.map_unseen);
            acc[1] += pts(r.map_seen);
            acc[2] += pts(r.map_full);
            per_seed.push(pts(r.map_full));
        }
        let n = seeds.len().max(1) as f64;
        rows.push(AblationRow {
            use_la: la,
            use_ia: ia,
            unseen: acc[0] / n,
            seen: acc[1] / n,
            full: acc[2] / n,
            per_seed,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "" };
    let mut s = String::from("LA,IA,Unseen,Seen,Full\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.2},{:.2},{:.2}\n", mark(r.use_la), mark(r.use_ia), r.unseen, r.seen, r.full));
    }
    s
}

pub fn cmd_ablate(cfg: &RunConfig, dir: &Path) -> Result<Vec<AblationRow>> {
    let corpus = match cfg.path("dataset") {
        Some(data) => load_corpus(cfg, &data)?,
        None => build_corpus(cfg)?,
    };
    let rows = ablate(cfg, &corpus, &cfg.seeds("ablate_seeds"), cfg.exec())?;
    write(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// gradient checks

/// Detections for a one-human, two-object scene (two candidate pairs) and a
/// ground-truth instance on the first pair.
pub fn two_pair_scene(model: &Lain, seed: u64) -> (Vec<f32>, Vec<Detection>, Vec<HoiInstance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = model.cfg.image_size();
    let pixels: Vec<f32> = (0..size * size * 3).map(|_| rng.gen::<f32>()).collect();
    let dim = model.cfg.det_dim;
    let mut det = |bbox: BBox, class: usize, confidence: f64| Detection {
        bbox,
        class,
        confidence,
        feature: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let n_obj = model.space.num_objects();
    let human = model.space.human();
    let other = (human + 1) % n_obj;
    let dets = vec![
        det([0.1, 0.15, 0.35, 0.7], human, 0.95),
        det([0.3, 0.3, 0.62, 0.66], other, 0.8),
        det([0.55, 0.05, 0.9, 0.4], (other + 1) % n_obj, 0.7),
    ];
    let verb = 0;
    let gt = vec![HoiInstance {
        human: 0,
        object: 1,
        human_box: dets[0].bbox,
        object_box: dets[1].bbox,
        object_class: other,
        verb,
        category: model.space.category(other, verb).expect("category exists"),
    }];
    (pixels, dets, gt)
}

/// Full focal loss of one scene, rebuilt from `store`.
pub fn scene_loss(
    g: &mut Graph,
    model: &Lain,
    store: &ParamStore,
    pixels: &[f32],
    dets: &[Detection],
    gt: &[HoiInstance],
    cfg: &RunConfig,
) -> Result<crate::tensor::Var> {
    let probe = Lain {
        cfg: model.cfg.clone(),
        space: model.space.clone(),
        params: store.clone(),
    };
    let (out, scores) = probe.score(g, pixels, dets)?;
    let scores = scores.ok_or_else(|| Error::InvalidState("scene has no pairs".into()))?;
    let split = ZeroShotSplit::full(model.space.num_categories());
    let t = cfg.train();
    let y = crate::train::assign_labels(&out.pairs, dets, gt, &split, t.focal.iou_threshold);
    g.focal_bce(scores, &y, t.focal.alpha, t.focal.gamma)
}

#[derive(Debug, Clone)]
pub struct GradCheckSuite {
    pub full: GradCheckReport,
    pub primitives: Vec<(String, GradCheckReport)>,
}

impl GradCheckSuite {
    pub fn worst(&self) -> f64 {
        self.primitives
            .iter()
            .map(|(_, r)| r.max_rel_error)
            .fold(self.full.max_rel_error, f64::max)
    }
}

/// Model with every gate and the prompt offset moved off zero, so that every
/// trainable group sits on the loss path with a non-trivial gradient.
pub fn perturbed_model(cfg: &RunConfig, seed: u64) -> Result<Lain> {
    let mut model = Lain::new(cfg.model(), cfg.space()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = model.gate_names();
    names.push("text.prompt_offset".into());
    for n in names {
        for v in model.params.value_mut(&n)?.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    Ok(model)
}

pub fn gradcheck_suite(cfg: &RunConfig) -> Result<GradCheckSuite> {
    let opts = GradCheckOptions {
        eps: cfg.number("gradcheck_eps"),
        max_entries_per_param: Some(cfg.count("gradcheck_max_entries")),
        seed: cfg.seed("gradcheck_seed"),
        exec: cfg.exec(),
    };
    let model = perturbed_model(cfg, opts.seed)?;
    let (pixels, dets, gt) = two_pair_scene(&model, opts.seed);
    let names = model.params.trainable_names();
    let full = grad_check(
        &model.params,
        &names,
        |g, s| scene_loss(g, &model, s, &pixels, &dets, &gt, cfg),
        &opts,
    )?;
    Ok(GradCheckSuite {
        full,
        primitives: primitive_checks(&opts)?,
    })
}

fn random_store(entries: &[(&str, &[usize])], rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in entries {
        s.insert(*name, Tensor::randn(shape, 1.0, rng), true).expect("unique names");
    }
    s
}

/// conv2d, layer_norm, attention, roi_align and focal_bce in isolation, each
/// on several random shapes.
pub fn primitive_checks(opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let all = |s: &ParamStore| s.trainable_names();
    let full_opts = GradCheckOptions {
        max_entries_per_param: None,
        ..opts.clone()
    };
    for trial in 0..2 {
        let (h, w, ci, co) = (rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..4), rng.gen_range(1..4));
        for k in [1, 3, 5] {
            let s = random_store(&[("x", &[h, w, ci]), ("k", &[k, k, ci, co])], &mut rng);
            let r = grad_check(&s, &all(&s), |g, s| {
                let x = g.param(s, "x")?;
                let kk = g.param(s, "k")?;
                g.conv2d(x, kk)
            }, &full_opts)?;
            out.push((format!("conv2d k={k} {h}x{w}x{ci}->{co} #{trial}"), r));
        }

        let (n, d) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let s = random_store(&[("x", &[n, d]), ("gain", &[d]), ("bias", &[d])], &mut rng);
        let r = grad_check(&s, &all(&s), |g, s| {
            let (x, ga, b) = (g.param(s, "x")?, g.param(s, "gain")?, g.param(s, "bias")?);
            g.layer_norm(x, ga, b, 1e-5)
        }, &full_opts)?;
        out.push((format!("layer_norm {n}x{d} #{trial}"), r));

        let (nq, nk, heads) = (rng.gen_range(1..4), rng.gen_range(2..5), [1, 2][trial]);
        let d = 4;
        let mut s = random_store(&[("q_in", &[nq, d]), ("kv_in", &[nk, d])], &mut rng);
        Init {
            store: &mut s,
            rng: &mut rng,
            trainable: true,
        }
        .attention("attn", d, 1.0)?;
        let r = grad_check(&s, &all(&s), |g, s| {
            let (q, kv) = (g.param(s, "q_in")?, g.param(s, "kv_in")?);
            let w = AttentionVars::load(g, s, "attn")?;
            nn::multi_head_attention(g, q, kv, kv, heads, &w, None)
        }, &full_opts)?;
        out.push((format!("attention {nq}q {nk}k {heads}h #{trial}"), r));

        let (h, w, c) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..4));
        let x1 = rng.gen_range(0.0..0.5);
        let y1 = rng.gen_range(0.0..0.5);
        let bbox = [x1, y1, x1 + rng.gen_range(0.2..0.5), y1 + rng.gen_range(0.2..0.5)];
        let s = random_store(&[("map", &[h, w, c])], &mut rng);
        let r = grad_check(&s, &all(&s), |g, s| {
            let m = g.param(s, "map")?;
            g.roi_align(m, bbox, 3, 2)
        }, &full_opts)?;
        out.push((format!("roi_align {h}x{w}x{c} #{trial}"), r));

        let (n, m) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let s = random_store(&[("z", &[n, m])], &mut rng);
        let labels = Tensor::new(vec![n, m], (0..n * m).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect())?;
        let r = grad_check(&s, &all(&s), |g, s| {
            let z = g.param(s, "z")?;
            let p = g.sigmoid(z);
            g.focal_bce(p, &labels, 0.25, 2.0)
        }, &full_opts)?;
        out.push((format!("focal_bce {n}x{m} #{trial}"), r));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// oracle suite

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn max_diff(a: &oracle::Mat, b: &oracle::Mat) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            if x.len() != y.len() {
                vec![f64::INFINITY]
            } else {
                x.iter().zip(y).map(|(p, q)| (p - q).abs()).collect()
            }
        })
        .fold(0.0, f64::max)
}

fn opt_diff(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (None, None) => 0.0,
        (Some(x), Some(y)) => (x - y).abs(),
        _ => f64::INFINITY,
    }
}

/// A small random prediction/gt set over one or two scenes and up to three
/// categories, with boxes drawn from a few jittered prototypes so that
/// matches, near misses and score ties all occur.
pub fn random_instance_set(rng: &mut impl Rng) -> (Vec<Prediction>, Vec<GroundTruth>) {
    let protos: Vec<BBox> = (0..3)
        .map(|_| {
            let x = rng.gen_range(0.0..0.6);
            let y = rng.gen_range(0.0..0.6);
            [x, y, x + rng.gen_range(0.05..0.4), y + rng.gen_range(0.05..0.4)]
        })
        .collect();
    let jitter = |rng: &mut dyn rand::RngCore, b: &BBox| -> BBox {
        let j = rng.gen_range(0.0..0.08);
        [b[0] + j * rng.gen_range(-1.0..1.0), b[1] + j * rng.gen_range(-1.0..1.0), b[2] + j * rng.gen_range(-1.0..1.0), b[3] + j * rng.gen_range(-1.0..1.0)]
    };
    let n_gt = rng.gen_range(0..=5);
    let n_pred = rng.gen_range(0..=10);
    let gt = (0..n_gt)
        .map(|_| GroundTruth {
            scene: rng.gen_range(0..2),
            category: rng.gen_range(0..3),
            human_box: protos[rng.gen_range(0..3)],
            object_box: protos[rng.gen_range(0..3)],
        })
        .collect();
    let preds = (0..n_pred)
        .map(|i| {
            let h = protos[rng.gen_range(0..3)];
            let o = protos[rng.gen_range(0..3)];
            Prediction {
                scene: rng.gen_range(0..2),
                pair: i,
                category: rng.gen_range(0..3),
                score: f64::from(rng.gen_range(0..5u8)) / 4.0,
                human_box: jitter(rng, &h),
                object_box: jitter(rng, &o),
            }
        })
        .collect();
    (preds, gt)
}

pub fn evaluator_checks(sets: usize, seed: u64) -> Vec<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bands = SizeBands {
        small_below: 0.02,
        large_from: 0.08,
    };
    let (mut ap_err, mut band_err, mut map_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..sets {
        let (preds, gt) = random_instance_set(&mut rng);
        let mut fast_aps = Vec::new();
        for c in 0..3 {
            let p: Vec<Prediction> = preds.iter().filter(|p| p.category == c).cloned().collect();
            let g: Vec<GroundTruth> = gt.iter().filter(|g| g.category == c).cloned().collect();
            let fast = eval::match_and_ap(&p, &g, 0.5);
            ap_err = ap_err.max(opt_diff(fast, oracle::category_ap(&p, &g, 0.5)));
            fast_aps.extend(fast);
            for role in [Role::Human, Role::Object] {
                for band in [Band::Small, Band::Medium, Band::Large] {
                    band_err = band_err.max(opt_diff(
                        eval::band_ap(&p, &g, 0.5, &bands, role, band),
                        oracle::band_ap(&p, &g, 0.5, &bands, role, band),
                    ));
                }
            }
        }
        let fast_map = (!fast_aps.is_empty()).then(|| fast_aps.iter().sum::<f64>() / fast_aps.len() as f64);
        map_err = map_err.max(opt_diff(fast_map, oracle::mean_ap(&preds, &gt, &[0, 1, 2], 0.5)));
    }
    vec![
        OracleCheck {
            name: format!("per-category AP vs brute force ({sets} sets)"),
            max_error: ap_err,
            tolerance: 1e-9,
        },
        OracleCheck {
            name: format!("size-band AP vs brute force ({sets} sets)"),
            max_error: band_err,
            tolerance: 1e-9,
        },
        OracleCheck {
            name: format!("mAP vs brute force ({sets} sets)"),
            max_error: map_err,
            tolerance: 1e-9,
        },
    ]
}

fn map3(t: &Tensor) -> Vec<oracle::Mat> {
    let [h, w, c] = t.shape() else { panic!("rank 3 expected") };
    (0..*h)
        .map(|y| (0..*w).map(|x| t.data()[(y * w + x) * c..(y * w + x + 1) * c].to_vec()).collect())
        .collect()
}

pub fn kernel_checks(trials: usize, seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut conv, mut roi, mut ln, mut attn) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let (h, w, ci, co) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x = Tensor::randn(&[h, w, ci], 1.0, &mut rng);
        let kern = Tensor::randn(&[k, k, ci, co], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(kern.clone()));
        let y = g.conv2d(xv, kv)?;
        let fast = map3(g.value(y));
        let slow = oracle::conv2d(&map3(&x), &kern);
        conv = conv.max(fast.iter().zip(&slow).map(|(a, b)| max_diff(a, b)).fold(0.0, f64::max));

        let x1 = rng.gen_range(-0.1..0.8);
        let y1 = rng.gen_range(-0.1..0.8);
        let bbox = [x1, y1, x1 + rng.gen_range(0.05..0.6), y1 + rng.gen_range(0.05..0.6)];
        let (s, samples) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let map = Tensor::randn(&[h, w, ci], 1.0, &mut rng);
        if let Ok(plan) = kernels::roi_align_plan(h, w, bbox, s, samples) {
            let fast = kernels::roi_align_apply(&plan, map.data(), ci);
            let fast: oracle::Mat = fast.chunks(ci).map(<[f64]>::to_vec).collect();
            roi = roi.max(max_diff(&fast, &oracle::roi_align(&map3(&map), &bbox, s, samples)));
        }

        let (n, d) = (rng.gen_range(1..5), rng.gen_range(2..9));
        let xs = Tensor::randn(&[n, d], 2.0, &mut rng);
        let gain = Tensor::randn(&[d], 1.0, &mut rng);
        let bias = Tensor::randn(&[d], 1.0, &mut rng);
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(xs.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
        let y = g.layer_norm(a, b, c, 1e-5)?;
        ln = ln.max(max_diff(&oracle::to_mat(g.value(y)), &oracle::layer_norm(&oracle::to_mat(&xs), gain.data(), bias.data(), 1e-5)));

        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = 4 * rng.gen_range(1..3);
        let mut store = ParamStore::new();
        Init {
            store: &mut store,
            rng: &mut rng,
            trainable: true,
        }
        .attention("a", d, 1.0)?;
        let q = Tensor::randn(&[rng.gen_range(1..5), d], 1.0, &mut rng);
        let kv = Tensor::randn(&[rng.gen_range(1..6), d], 1.0, &mut rng);
        let mut g = Graph::new();
        let w = AttentionVars::load(&mut g, &store, "a")?;
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let y = nn::multi_head_attention(&mut g, qv, kvv, kvv, heads, &w, None)?;
        let slow = oracle::attention(&store, "a", &oracle::to_mat(&q), &oracle::to_mat(&kv), &oracle::to_mat(&kv), heads, None);
        attn = attn.max(max_diff(&oracle::to_mat(g.value(y)), &slow));
    }
    let mk = |name: &str, e: f64, tol: f64| OracleCheck {
        name: format!("{name} ({trials} random cases)"),
        max_error: e,
        tolerance: tol,
    };
    Ok(vec![
        mk("conv2d vs loop oracle", conv, 1e-12),
        mk("roi_align vs bilinear loop oracle", roi, 1e-9),
        mk("layer_norm vs two-pass oracle", ln, 1e-12),
        mk("attention vs per-head loop oracle", attn, 1e-12),
    ])
}

/// LA, IA, backbone composition and scores against the loop oracle on small
/// random scenes, with gates moved off zero.
pub fn model_checks(cfg: &RunConfig, scenes: usize, seed: u64) -> Result<Vec<OracleCheck>> {
    let mut c = cfg.clone();
    c.set("layers", "1")?;
    let model = perturbed_model(&c, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut la, mut ia, mut fwd, mut sc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..scenes {
        let (pixels, mut dets, _) = two_pair_scene(&model, seed.wrapping_add(i as u64));
        for d in &mut dets {
            let dx = rng.gen_range(-0.1..0.1);
            d.bbox = [(d.bbox[0] + dx).max(0.0), d.bbox[1], (d.bbox[2] + dx).min(1.0), d.bbox[3]];
        }
        let mut g = Graph::new();
        let seq = model::embed_patches(&mut g, &model, &pixels)?;
        let patches = g.value(seq.patches).clone();
        let f = model::locality_adapter(&mut g, &model, 0, seq.patches, &dets)?;
        la = la.max(max_diff(&oracle::to_mat(g.value(f)), &oracle::locality_adapter(&model, 0, &oracle::to_mat(&patches), &dets)));

        let (_, tokens) = model::construct_ho_tokens(&mut g, &model, &dets)?;
        let tokens = tokens.expect("two pairs");
        let boxes: Vec<(BBox, BBox)> = vec![(dets[0].bbox, dets[1].bbox), (dets[0].bbox, dets[2].bbox)];
        let t = model::interaction_adapter(&mut g, &model, 0, tokens, f, &boxes)?;
        let slow_t = oracle::interaction_adapter(&model, 0, &oracle::to_mat(g.value(tokens)), &oracle::to_mat(g.value(f)), &boxes);
        ia = ia.max(max_diff(&oracle::to_mat(g.value(t)), &slow_t));

        let mut g = Graph::new();
        let (out, scores) = model.score(&mut g, &pixels, &dets)?;
        let (_, ho, _, _) = oracle::lain_forward(&model, &pixels, &dets);
        fwd = fwd.max(max_diff(&oracle::to_mat(g.value(out.ho_tokens.expect("pairs"))), &ho));
        sc = sc.max(max_diff(&oracle::to_mat(g.value(scores.expect("pairs"))), &oracle::scores(&model, &ho)));
    }
    let mk = |name: &str, e: f64| OracleCheck {
        name: format!("{name} ({scenes} scenes)"),
        max_error: e,
        tolerance: 1e-12,
    };
    Ok(vec![
        mk("locality adapter vs equation-by-equation oracle", la),
        mk("interaction adapter vs step-by-step oracle", ia),
        mk("one-layer forward vs hand-chained oracle", fwd),
        mk("scores vs direct sigmoid oracle", sc),
    ])
}

/// Closed-form spot values.
pub fn closed_form_checks() -> Vec<OracleCheck> {
    let iou_err = (iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs();
    let mut g = Graph::new();
    let p = g.constant(Tensor::scalar(0.5));
    let loss = g.focal_bce(p, &Tensor::scalar(1.0), 0.25, 2.0).expect("scalar shapes");
    let focal_err = (g.value(loss).data()[0] - 0.25 * 0.25 * std::f64::consts::LN_2).abs();
    vec![
        OracleCheck {
            name: "iou([0,0,2,2],[1,1,3,3]) = 1/7".into(),
            max_error: iou_err,
            tolerance: 1e-15,
        },
        OracleCheck {
            name: "focal(p=0.5, y=1, α=0.25, γ=2) = 0.25·0.25·ln2".into(),
            max_error: focal_err,
            tolerance: 1e-15,
        },
    ]
}

pub fn oracle_suite(cfg: &RunConfig) -> Result<Vec<OracleCheck>> {
    let mut out = closed_form_checks();
    out.extend(kernel_checks(50, 11)?);
    out.extend(evaluator_checks(50, 12));
    out.extend(model_checks(cfg, 3, 13)?);
    Ok(out)
}

pub fn print_checks(checks: &[OracleCheck], mut w: impl std::io::Write) -> bool {
    let mut ok = true;
    for c in checks {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        ok &= c.passed();
        let _ = writeln!(w, "{verdict} {} max_err={:.3e} tol={:.0e}", c.name, c.max_error, c.tolerance);
    }
    ok
}

pub fn print_gradcheck(suite: &GradCheckSuite, tol: f64) -> bool {
    let mut out = std::io::stdout().lock();
    let full = &suite.full;
    let _ = writeln!(
        out,
        "full loss: {} entries over {} parameters, max rel err {:.3e} at {:?}",
        full.entries_checked(),
        full.params.len(),
        full.max_rel_error,
        full.worst
    );
    for (name, r) in &suite.primitives {
        let _ = writeln!(out, "{name}: max rel err {:.3e}", r.max_rel_error);
    }
    let worst = suite.worst();
    let _ = writeln!(out, "worst relative error {worst:.3e} (tolerance {tol:.0e})");
    worst <= tol
}
