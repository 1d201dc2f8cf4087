use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use maskgraph::contours::{contour_length_stats, extract_organ_contours, save_contours_csv};
use maskgraph::data_io::synth::{gen_synthetic_population, SyntheticSample};
use maskgraph::data_io::{
    load_mask, load_samples, pad_and_resize, save_image, save_manifest, split_subjects, ManifestEntry, Sample,
    ShapeOracle,
};
use maskgraph::engine::{
    load_checkpoint, prepare_items, save_checkpoint, snake_fit, train_log_header, TrainState, Trainer,
};
use maskgraph::losses::{gather_organs, to_pixels};
use maskgraph::metrics::{correspondence_consistency, graph_masks, score_organ, MetricsReport};
use maskgraph::model::Model;
use maskgraph::topology::{build_independent, build_unified, landmark_count, resolution_counts, GraphTopology, TopologyMode};
use maskgraph::{LabelMask, Point};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::svg;

/// Workspace root plus per-command defaults; relative paths resolve
/// against the root.
pub struct Ctx {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub threads: usize,
}

impl Ctx {
    pub fn path(&self, given: Option<&Path>, default: &str) -> PathBuf {
        match given {
            Some(p) if p.is_absolute() => p.to_path_buf(),
            Some(p) => self.root.join(p),
            None => self.root.join(default),
        }
    }

    fn out_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        self.cfg.save(&dir)?;
        Ok(dir)
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_topology(path: &Path) -> Result<GraphTopology> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(GraphTopology::from_json(&text)?)
}

fn load_resized(manifest: &Path, size: usize) -> Result<Vec<Sample>> {
    Ok(load_samples(manifest)?.iter().map(|s| pad_and_resize(s, size)).collect())
}

/// Runs `f` over `items` on up to `threads` scoped workers, keeping order.
fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| anyhow!("worker thread panicked"))??);
        }
        Ok(out)
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub organs: Vec<u8>,
    /// Finest-level node coordinates in pixels of the model input.
    pub points: Vec<Point>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct SplitIds {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

pub fn gen_synth(ctx: &Ctx) -> Result<()> {
    let sc = &ctx.cfg.synth;
    let dir = ctx.out_dir("data")?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.dataset.seed);
    let pop: Vec<SyntheticSample> = gen_synthetic_population(sc.n, &sc.shapes, sc.size, sc.touching, &mut rng)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(ctx.cfg.dataset.seed);
    mask_rng.set_stream(1);
    let mut entries = Vec::with_capacity(pop.len());
    let mut oracles: BTreeMap<String, Vec<ShapeOracle>> = BTreeMap::new();
    for s in pop {
        let id = s.sample.subject_id.clone();
        let mut mask = s.sample.mask.clone();
        let mut annotated = s.sample.annotated_organs.clone();
        if sc.touching && rand::Rng::random::<f64>(&mut mask_rng) < sc.missing_fraction {
            mask = mask.map(|&l| if l == 2 { 0 } else { l });
            annotated.retain(|&l| l != 2);
        }
        let (img, msk) = (format!("images/{id}.pgm"), format!("masks/{id}.pgm"));
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        save_image(&s.sample.image, dir.join(&img))?;
        maskgraph::data_io::save_mask(&mask, dir.join(&msk))?;
        entries.push(ManifestEntry {
            subject_id: id.clone(),
            image_path: img,
            mask_path: msk,
            annotated_organs: annotated,
        });
        oracles.insert(id, s.oracles);
    }
    save_manifest(&entries, dir.join("manifest.json"))?;
    write_json(&dir.join("oracles.json"), &oracles)?;
    info!("wrote {} synthetic samples to {}", entries.len(), dir.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct OrganStats {
    organ: u8,
    mean_length: f64,
    landmarks: Vec<usize>,
}

pub fn prepare(ctx: &Ctx, manifest: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let samples = load_resized(&ctx.path(manifest, "data/manifest.json"), cfg.dataset.input_size)?;
    let dir = ctx.out_dir("prepared")?;
    let organs = cfg.dataset.organ_labels.clone();
    fs::create_dir_all(dir.join("contours"))?;
    let mut all = Vec::with_capacity(samples.len());
    for s in &samples {
        let annotated: Vec<u8> = organs.iter().copied().filter(|&o| s.is_annotated(o)).collect();
        let contours = extract_organ_contours(&s.mask, &annotated);
        save_contours_csv(&contours, dir.join("contours").join(format!("{}.csv", s.subject_id)))?;
        all.push(contours);
    }
    let lengths = contour_length_stats(&all, &organs)?;
    let levels = cfg.dataset.resolution_levels();
    let mut stats = Vec::new();
    let mut counts = BTreeMap::new();
    for (&organ, &len) in &lengths {
        let n1 = landmark_count(len, cfg.dataset.scale_factor, cfg.dataset.min_landmarks);
        stats.push(OrganStats {
            organ,
            mean_length: len,
            landmarks: resolution_counts(n1, levels)?,
        });
        counts.insert(organ, n1);
    }
    write_json(&dir.join("contour_stats.json"), &stats)?;
    let topology = match cfg.topology.mode {
        TopologyMode::Independent => {
            let list: Vec<(u8, usize)> = counts.iter().map(|(&o, &n)| (o, n)).collect();
            build_independent(&list, levels)?
        }
        TopologyMode::Unified => {
            let (s, atlas) = samples
                .iter()
                .zip(&all)
                .find(|(_, c)| organs.iter().all(|o| c.contains_key(o)))
                .ok_or_else(|| anyhow!("no sample contains every organ; cannot pick an atlas"))?;
            info!("atlas sample {}", s.subject_id);
            let centers: BTreeMap<u8, Vec<Point>> = atlas.iter().map(|(&o, c)| (o, c.centers())).collect();
            build_unified(&centers, cfg.topology.delta, &counts, levels)?
        }
    };
    write(&dir.join("topology.json"), topology.to_json()? + "\n")?;
    let tensors: Vec<_> = (0..topology.num_levels()).map(|l| topology.edge_tensor(l)).collect();
    write_json(&dir.join("edge_tensors.json"), &tensors)?;
    info!(
        "topology: {} organs, nodes per level {:?}",
        topology.organs.len(),
        topology.levels.iter().map(|l| l.num_nodes).collect::<Vec<_>>()
    );
    Ok(())
}

fn score(
    report: &mut MetricsReport,
    topology: &GraphTopology,
    sample: &Sample,
    points_px: &[Point],
) -> Result<()> {
    let (w, h) = (sample.mask.width(), sample.mask.height());
    let masks = graph_masks(points_px, topology.finest(), w, h);
    for (o, &organ) in topology.organs.iter().enumerate() {
        if sample.is_annotated(organ) {
            report
                .scores
                .push(score_organ(&sample.subject_id, organ, &masks[o], &sample.mask.binarize(organ))?);
        }
    }
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    write(&dir.join("metrics.csv"), report.to_csv())?;
    write(&dir.join("summary.json"), report.summary_json()? + "\n")?;
    if !report.correspondence.is_empty() {
        write(&dir.join("correspondence.csv"), report.correspondence_csv())?;
    }
    for s in report.summary() {
        info!(
            "organ {}: dice {:.4} (median {:.4}), HD {:.2} px, ASSD {:.3} px{}",
            s.organ,
            s.mean_dice,
            s.median_dice,
            s.mean_hausdorff_px,
            s.mean_assd_px,
            s.correspondence.map(|c| format!(", correspondence {c:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

pub fn fit(ctx: &Ctx, manifest: Option<&Path>, topology: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let samples = load_resized(&ctx.path(manifest, "data/manifest.json"), cfg.dataset.input_size)?;
    let topo = load_topology(&ctx.path(topology, "prepared/topology.json"))?;
    let dir = ctx.out_dir("fit")?;
    let side = cfg.dataset.input_size as f64;
    let fits = par_map(&samples, ctx.threads, |s| {
        let fit = snake_fit(&s.mask, &topo, &cfg.snake).with_context(|| format!("fitting {}", s.subject_id))?;
        Ok(to_pixels(&fit.points, side))
    })?;
    let mut report = MetricsReport::default();
    for (s, pts) in samples.iter().zip(&fits) {
        write_json(
            &dir.join("landmarks").join(format!("{}.json", s.subject_id)),
            &Prediction {
                subject_id: s.subject_id.clone(),
                organs: topo.organs.clone(),
                points: pts.clone(),
            },
        )?;
        score(&mut report, &topo, s, pts)?;
    }
    write_report(&dir, &report)
}

pub fn train(
    ctx: &Ctx,
    manifest: Option<&Path>,
    topology: Option<&Path>,
    iters: Option<usize>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(n) = iters {
        cfg.train.iterations = n;
    }
    let samples = load_resized(&ctx.path(manifest, "data/manifest.json"), cfg.dataset.input_size)?;
    let topo = load_topology(&ctx.path(topology, "prepared/topology.json"))?;
    let dir = Ctx {
        root: ctx.root.clone(),
        cfg: cfg.clone(),
        threads: ctx.threads,
    }
    .out_dir("train")?;
    write(&dir.join("topology.json"), topo.to_json()? + "\n")?;
    let split = split_subjects(&samples, cfg.split.test_fraction, cfg.dataset.seed)?;
    let ids = |v: &[Sample]| v.iter().map(|s| s.subject_id.clone()).collect::<Vec<_>>();
    write_json(
        &dir.join("split.json"),
        &SplitIds {
            train: ids(&split.train),
            val: ids(&split.val),
            test: ids(&split.test),
        },
    )?;
    let model = Model::new(cfg.model.clone(), &topo)?;
    let mode = cfg.model.input_mode;
    let cap = cfg.train.max_truth_points;
    let train_items = prepare_items(&split.train, &topo.organs, mode, cap);
    let val_items = prepare_items(&split.val, &topo.organs, mode, cap);
    let state = match resume {
        Some(p) => {
            let ck = load_checkpoint(ctx.path(Some(p), ""), &model)?;
            info!("resuming at iteration {}", ck.schedule.iteration);
            TrainState {
                params: ck.params,
                adam: ck.adam,
                iteration: ck.schedule.iteration,
            }
        }
        None => TrainState::new(model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed))),
    };
    let trainer = Trainer::new(&model, &topo, cfg.train.clone())?;
    let log_path = dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", train_log_header())?;
    let mut io_err = None;
    let out = trainer.run(state, &train_items, &val_items, |row| {
        if let Err(e) = writeln!(log, "{}", row.csv()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing training log");
    }
    log.flush()?;
    save_checkpoint(dir.join("best.ckpt"), &model, &out.best_params, &out.state.adam, &out.schedule)?;
    save_checkpoint(dir.join("last.ckpt"), &model, &out.state.params, &out.state.adam, &out.schedule)?;
    info!(
        "best validation chamfer {} at iteration {}",
        out.best_val_chamfer.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into()),
        out.best_iteration
    );
    Ok(())
}

pub fn eval(ctx: &Ctx, run: Option<&Path>, manifest: Option<&Path>, all: bool, oracles: Option<&Path>) -> Result<()> {
    let run = ctx.path(run, "train");
    let cfg: RunConfig = read_json(&run.join("config.resolved.json"))?;
    let topo = load_topology(&run.join("topology.json"))?;
    let model = Model::new(cfg.model.clone(), &topo)?;
    let ck = load_checkpoint(run.join("best.ckpt"), &model)?;
    let mut samples = load_resized(&ctx.path(manifest, "data/manifest.json"), cfg.dataset.input_size)?;
    if !all {
        let split: SplitIds = read_json(&run.join("split.json"))?;
        let test: BTreeSet<String> = split.test.into_iter().collect();
        samples.retain(|s| test.contains(&s.subject_id));
        if samples.is_empty() {
            bail!("none of the manifest samples belong to the run's test split");
        }
    }
    let dir = Ctx {
        root: ctx.root.clone(),
        cfg: cfg.clone(),
        threads: ctx.threads,
    }
    .out_dir("eval")?;
    let side = cfg.dataset.input_size as f64;
    let items = prepare_items(&samples, &topo.organs, cfg.model.input_mode, cfg.train.max_truth_points);
    let preds = par_map(&items, ctx.threads, |item| Ok(to_pixels(&model.predict(&ck.params, &item.input)?[0], side)))?;
    let mut report = MetricsReport::default();
    for (s, pts) in samples.iter().zip(&preds) {
        write_json(
            &dir.join("predictions").join(format!("{}.json", s.subject_id)),
            &Prediction {
                subject_id: s.subject_id.clone(),
                organs: topo.organs.clone(),
                points: pts.clone(),
            },
        )?;
        score(&mut report, &topo, s, pts)?;
    }
    let oracle_path = ctx.path(oracles, "data/oracles.json");
    if oracle_path.exists() {
        let table: BTreeMap<String, Vec<ShapeOracle>> = read_json(&oracle_path)?;
        let original = load_samples(ctx.path(manifest, "data/manifest.json"))?;
        let same_size = original.iter().all(|s| s.mask.width() == cfg.dataset.input_size && s.mask.height() == cfg.dataset.input_size);
        if !same_size {
            warn!("oracle curves are in original pixel coordinates; skipping correspondence for resized data");
        } else {
            for (o, &organ) in topo.organs.iter().enumerate() {
                let mut p = Vec::new();
                let mut orc = Vec::new();
                for (s, pts) in samples.iter().zip(&preds) {
                    if let Some(curve) = table.get(&s.subject_id).and_then(|v| v.get(organ as usize - 1)) {
                        p.push(gather_organs(pts, topo.finest()).swap_remove(o));
                        orc.push(curve);
                    }
                }
                if !p.is_empty() {
                    report.correspondence.push((organ, correspondence_consistency(&p, &orc)?));
                }
            }
        }
    }
    write_report(&dir, &report)
}

pub fn export_atlas(
    ctx: &Ctx,
    topology: Option<&Path>,
    landmarks: Option<&Path>,
    mask: Option<&Path>,
    file: Option<&Path>,
) -> Result<()> {
    let topo = load_topology(&ctx.path(topology, "prepared/topology.json"))?;
    let size = ctx.cfg.dataset.input_size;
    let mask: Option<LabelMask> = mask.map(|m| load_mask(ctx.path(Some(m), ""))).transpose()?;
    let points: Vec<Point> = if let Some(p) = landmarks {
        read_json::<Prediction>(&ctx.path(Some(p), ""))?.points
    } else if let Some(atlas) = &topo.atlas_positions {
        atlas[0].clone()
    } else {
        let m = mask.clone().unwrap_or_else(|| {
            let c = size as f64 / 2.0;
            let r = size as f64 / 4.0;
            LabelMask::from_fn(size, size, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                u8::from(dx * dx + dy * dy <= r * r) * topo.organs[0]
            })
        });
        to_pixels(&maskgraph::engine::circle_init(&m, &topo), m.width().max(m.height()) as f64)
    };
    if points.len() != topo.finest().num_nodes {
        bail!("{} landmark positions for {} topology nodes", points.len(), topo.finest().num_nodes);
    }
    let side = mask.as_ref().map(|m| m.width().max(m.height())).unwrap_or(size);
    let out = ctx.path(file, "atlas.svg");
    write(&out, svg::render(topo.finest(), &points, mask.as_ref(), side))?;
    info!("wrote {}", out.display());
    Ok(())
}
