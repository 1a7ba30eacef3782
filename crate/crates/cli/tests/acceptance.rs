//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Set `CVLA_ACCEPTANCE_CACHE=<dir>` to reuse trained models between runs;
//! by default every model is trained from scratch.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cvla::blackbox::{parse_prompt, reorganize_prompt, GeneratorSpec, ReportGenerator};
use cvla::cvla::{
    prepare_dataset, select_checkpoint, train_cvla, CounterfactualRecord, DatasetRecord, Explainer, LabelSource, Split,
    SplitSizes, TailoredDataset, TrainRunConfig, TrainedCheckpoint,
};
use cvla::diffusion::sampler::LinearPredictor;
use cvla::diffusion::train::{draw_noise, loss_and_grad};
use cvla::diffusion::{
    ddim_invert_step, ddim_step, ddpm_step, Denoiser, InversionConfig, NetConfig, NoisePredictor, NoiseSchedule,
    NoisyState, ScheduleConfig,
};
use cvla::evalx::{localization_score, run_ablation, ExplainSettings, ModelVariant};
use cvla::findings::FindingVector;
use cvla::frames::{connected_components, frame_pipeline, top_k_frames, Component, Connectivity, FrameConfig, Mask};
use cvla::image::{BBox, Image};
use cvla::rng::substream;
use cvla::synthworld::{sample_dataset, PhantomSample, WorldConfig};
use cvla_cli::commands::{cmd_explain, cmd_synth, ModelRef, QuerySource};
use cvla_cli::config::{CliConfig, ExplainConfig, Prevalence};
use rand::Rng as _;

const IMAGE_SIZE: usize = 48;
const WORLD_SEED: u64 = 7;
const N_SAMPLES: usize = 760;
const SPLITS: SplitSizes = SplitSizes { val: 40, test: 200 };
const PREVALENCE: f64 = 0.3;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
}

fn report(lines: &mut Vec<Line>, id: usize, name: &'static str, result: Result<(bool, String), String>) {
    let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("criterion {id:>2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    lines.push(Line { id, name, pass });
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn world() -> WorldConfig {
    WorldConfig { image_size: IMAGE_SIZE, rng_seed: WORLD_SEED, ..Default::default() }
}

fn generator(id: &str) -> ReportGenerator {
    let vocab = world().vocabulary().unwrap();
    ReportGenerator::new(GeneratorSpec::shipped(id, IMAGE_SIZE).unwrap(), vocab).unwrap()
}

fn train_config(source: LabelSource) -> TrainRunConfig {
    TrainRunConfig { source, steps: 4000, checkpoint_every: 1000, seed: 1, ..Default::default() }
}

fn sampler_algebra() -> Result<(bool, String), String> {
    let t0 = Instant::now();
    let schedule = NoiseSchedule::new(ScheduleConfig::default()).map_err(|e| e.to_string())?;
    let ts = schedule.strided(25).map_err(|e| e.to_string())?;
    let c = FindingVector::from_bools(vec![true, false, true, false, false]);
    let refine = InversionConfig { refine_iters: 200, tolerance: 0.0 };
    let mut rng = substream(11, "sampler");
    let images: Vec<Image> = (0..4).map(|_| Image::from_fn(16, 16, |_, _| rng.random_range(-2.0..2.0))).collect();
    let zero = LinearPredictor { scale: 0.0 };
    let linear = LinearPredictor { scale: 0.3 };
    let predictors: [&dyn NoisePredictor; 2] = [&zero, &linear];

    // Round trip through every adjacent pair of the strided schedule.
    let mut worst: f64 = 0.0;
    for p in predictors {
        for w in ts.windows(2) {
            for x in &images {
                let state = NoisyState { x: x.clone(), t: w[0] };
                let up = ddim_invert_step(p, &schedule, &state, &c, w[1], &refine).map_err(|e| e.to_string())?;
                let back = ddim_step(p, &schedule, &up, &c, w[0]).map_err(|e| e.to_string())?;
                worst = worst.max(max_abs_diff(&back.x, x));
            }
        }
    }

    // With zero noise prediction a deterministic step only rescales.
    let mut alpha_bar = vec![1.0];
    for i in 0..200 {
        let beta = 1e-4 + (0.04 - 1e-4) * i as f64 / 199.0;
        alpha_bar.push(alpha_bar[i] * (1.0 - beta));
    }
    let mut closed_form: f64 = 0.0;
    for w in ts.windows(2) {
        let state = NoisyState { x: images[0].clone(), t: w[1] };
        let down = ddim_step(&zero, &schedule, &state, &c, w[0]).map_err(|e| e.to_string())?;
        let scale = (alpha_bar[w[0]] / alpha_bar[w[1]]).sqrt();
        closed_form = closed_form.max(max_abs_diff(&down.x, &images[0].map(|v| v * scale)));
    }

    // Zero-variance stochastic steps against deterministic ones, with a network.
    let net = Denoiser::new(
        NetConfig {
            image_size: 16,
            channels: [4, 4, 8],
            emb_dim: 8,
            cond_map_channels: 1,
            n_findings: 5,
            t_train: 200,
        },
        &mut substream(3, "init"),
    )
    .map_err(|e| e.to_string())?;
    let models: [&dyn NoisePredictor; 3] = [&zero, &linear, &net];
    let mut identical = true;
    for m in models {
        for t in (1..=200).step_by(13) {
            let state = NoisyState { x: images[1].clone(), t };
            let a = ddpm_step(m, &schedule, &state, &c, 0.0, &mut rng).map_err(|e| e.to_string())?;
            let b = ddim_step(m, &schedule, &state, &c, t - 1).map_err(|e| e.to_string())?;
            identical &= a.x.data().iter().zip(b.x.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        }
    }
    let runtime = secs(t0);
    let pass = worst <= 1e-8 && closed_form <= 1e-12 && identical && runtime < 1.0;
    Ok((
        pass,
        format!(
            "round trip max err {worst:.2e}, zero-noise closed form err {closed_form:.2e}, sigma 0 bit-identical {identical}, {runtime:.2} s"
        ),
    ))
}

fn gradient_check() -> Result<(bool, String), String> {
    let t0 = Instant::now();
    let cfg =
        NetConfig { image_size: 8, channels: [2, 3, 4], emb_dim: 4, cond_map_channels: 1, n_findings: 5, t_train: 200 };
    let mut net = Denoiser::new(cfg, &mut substream(5, "init")).map_err(|e| e.to_string())?;
    let n_params = net.params().count();
    let schedule = NoiseSchedule::new(ScheduleConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = substream(5, "batch");
    let batch: Vec<(Image, FindingVector)> = (0..4)
        .map(|_| {
            let img = Image::from_fn(8, 8, |_, _| rng.random_range(0.0..1.0));
            let c = FindingVector::from_bools((0..5).map(|_| rng.random_bool(0.5)).collect());
            (img, c)
        })
        .collect();
    let examples = draw_noise(&schedule, &batch, &mut rng);
    let (_, grads) = loss_and_grad(&net, &schedule, &examples).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, g) in grads.iter().enumerate() {
        for (i, &analytic) in g.iter().enumerate() {
            let orig = net.params().params[pi].data[i];
            net.params_mut().params[pi].data[i] = orig + h;
            let plus = loss_and_grad(&net, &schedule, &examples).map_err(|e| e.to_string())?.0;
            net.params_mut().params[pi].data[i] = orig - h;
            let minus = loss_and_grad(&net, &schedule, &examples).map_err(|e| e.to_string())?.0;
            net.params_mut().params[pi].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
            checked += 1;
        }
    }
    let runtime = secs(t0);
    let pass = n_params <= 10_000 && worst < 1e-4 && runtime < 30.0;
    Ok((pass, format!("{n_params} params, {checked} checked, worst relative error {worst:.2e}, {runtime:.1} s")))
}

/// Components by flood fill from each unvisited set pixel in raster order.
fn flood_fill_components(mask: &Mask, eight: bool) -> Vec<Component> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) || seen[y * w + x] {
                continue;
            }
            let mut pixels = Vec::new();
            let mut stack = vec![(x, y)];
            seen[y * w + x] = true;
            while let Some((px, py)) = stack.pop() {
                pixels.push((px, py));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                            continue;
                        }
                        let (nx, ny) = (px as i64 + dx, py as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if mask.get(nx, ny) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            pixels.sort_by_key(|&(px, py)| (py, px));
            let x0 = pixels.iter().map(|p| p.0).min().unwrap();
            let x1 = pixels.iter().map(|p| p.0).max().unwrap() + 1;
            let y0 = pixels.iter().map(|p| p.1).min().unwrap();
            let y1 = pixels.iter().map(|p| p.1).max().unwrap() + 1;
            out.push(Component { pixels, bbox: BBox::new(x0, y0, x1, y1) });
        }
    }
    out
}

fn frame_exactness() -> Result<(bool, String), String> {
    let t0 = Instant::now();
    let mut rng = substream(13, "masks");
    let mut mismatches = 0;
    for _ in 0..500 {
        let density = rng.random_range(0.1..0.7);
        let mask = Mask::from_fn(32, 32, |_, _| rng.random_bool(density));
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let got = connected_components(&mask, conn);
            let want = flood_fill_components(&mask, eight);
            let mut order: Vec<&Component> = want.iter().collect();
            order.sort_by_key(|c| (std::cmp::Reverse(c.pixels.len()), c.bbox.y0, c.bbox.x0));
            let want_boxes: Vec<(BBox, usize)> = order.iter().take(5).map(|c| (c.bbox, c.pixels.len())).collect();
            let got_boxes: Vec<(BBox, usize)> = top_k_frames(&got, 5).boxes.iter().map(|b| (b.bbox, b.area)).collect();
            if got != want || got_boxes != want_boxes {
                mismatches += 1;
            }
        }
    }

    // Expected mask of a blurred 10x10 blob, from the separable kernel mass.
    let kernel: Vec<f64> = {
        let raw: Vec<f64> = (-2i64..=2).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let cover = |p: usize, lo: usize| -> f64 {
        (-2i64..=2)
            .filter(|i| (lo as i64..lo as i64 + 10).contains(&(p as i64 + i)))
            .map(|i| kernel[(i + 2) as usize])
            .sum()
    };
    let cfg = FrameConfig::default();
    let (mut blobs, mut blob_failures, mut min_iou) = (0, 0, f64::INFINITY);
    for bx in (2..=20).step_by(3) {
        for by in (2..=20).step_by(3) {
            let blob = BBox::new(bx, by, bx + 10, by + 10);
            let query = Image::filled(32, 32, 0.1);
            let cf = Image::from_fn(32, 32, |x, y| if blob.contains(x, y) { 0.9 } else { 0.1 });
            let expected = Mask::from_fn(32, 32, |x, y| 0.8 * 255.0 * cover(x, bx) * cover(y, by) > 95.0);
            let want = flood_fill_components(&expected, true);
            let frame = frame_pipeline(&query, &cf, &cfg, None).map_err(|e| e.to_string())?;
            blobs += 1;
            let ok = frame.boxes.len() == 1
                && want.len() == 1
                && frame.boxes[0].bbox == want[0].bbox
                && frame.boxes[0].area == want[0].pixels.len();
            let iou = frame.boxes.first().map_or(0.0, |b| b.bbox.iou(&blob));
            min_iou = min_iou.min(iou);
            if !ok || iou < 0.5 {
                blob_failures += 1;
            }
        }
    }
    let pass = mismatches == 0 && blob_failures == 0;
    Ok((
        pass,
        format!(
            "500 masks x 2 connectivities, {mismatches} mismatches; {blobs} blobs, {blob_failures} failures, min IoU {min_iou:.3}; {:.2} s",
            secs(t0)
        ),
    ))
}

fn prompt_grammar() -> Result<(bool, String), String> {
    let vocab = world().vocabulary().map_err(|e| e.to_string())?;
    let prefix = "The lung with the abnormalities of ";
    let (mut n, mut bad) = (0, 0);
    let mut seen = std::collections::BTreeSet::new();
    for v in FindingVector::enumerate_all(vocab.len()) {
        let prompt = reorganize_prompt(&v, &vocab);
        n += 1;
        let round_trip = parse_prompt(&prompt, &vocab).map_err(|e| e.to_string())?;
        if round_trip != v || !prompt.starts_with(prefix) || !seen.insert(prompt) {
            bad += 1;
        }
    }
    Ok((n == 32 && bad == 0, format!("{n} vectors, {bad} failures")))
}

struct Trained {
    checkpoints: Vec<TrainedCheckpoint>,
    seconds: f64,
    cached: bool,
}

impl Trained {
    fn best(&self) -> Result<&TrainedCheckpoint, String> {
        select_checkpoint(&self.checkpoints).map(|i| &self.checkpoints[i]).map_err(|e| e.to_string())
    }

    fn late(&self) -> Result<&TrainedCheckpoint, String> {
        self.checkpoints.last().ok_or_else(|| "no checkpoints".to_string())
    }
}

fn train(dataset: &TailoredDataset, source: LabelSource) -> Result<Trained, String> {
    let cfg = train_config(source);
    let key = serde_json::to_string(&(&world(), N_SAMPLES, SPLITS, &dataset.generator_id, &cfg)).unwrap();
    let cache = std::env::var_os("CVLA_ACCEPTANCE_CACHE").map(PathBuf::from);
    let cache_file = cache.as_ref().map(|d| d.join(format!("{}_{source}.json", dataset.generator_id)));
    if let Some(path) = &cache_file {
        if let Ok(bytes) = fs::read(path) {
            if let Ok((k, checkpoints)) = serde_json::from_slice::<(String, Vec<TrainedCheckpoint>)>(&bytes) {
                if k == key {
                    return Ok(Trained { checkpoints, seconds: 0.0, cached: true });
                }
            }
        }
    }
    let t0 = Instant::now();
    let outcome = train_cvla(dataset, &cfg, |log| {
        if log.step % 500 == 0 {
            eprintln!(
                "  [{} {source}] step {} loss {:.4} ({:.0} s)",
                dataset.generator_id,
                log.step,
                log.loss,
                secs(t0)
            );
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(reason) = outcome.aborted {
        return Err(format!("training aborted: {reason}"));
    }
    let seconds = secs(t0);
    if let Some(path) = &cache_file {
        fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        fs::write(path, serde_json::to_vec(&(key, &outcome.checkpoints)).unwrap()).map_err(|e| e.to_string())?;
    }
    Ok(Trained { checkpoints: outcome.checkpoints, seconds, cached: false })
}

fn timing(t: &Trained) -> String {
    if t.cached {
        "loaded from cache".into()
    } else {
        format!("trained in {:.0} s", t.seconds)
    }
}

fn queries(records: &[&DatasetRecord]) -> Vec<(usize, Image)> {
    records.iter().map(|r| (r.id, r.image.clone())).collect()
}

/// Mean (mass fraction, top-1 IoU) over successful cardiomegaly removals on
/// queries that truly show it, for the first `limit` such edits.
fn cardiomegaly_localization(
    records: &[CounterfactualRecord],
    samples: &[PhantomSample],
    cfg: &FrameConfig,
    cardio: usize,
    limit: usize,
) -> Result<(usize, f64, f64), String> {
    let (mut n, mut mass, mut iou) = (0, 0.0, 0.0);
    for rec in records {
        if n == limit {
            break;
        }
        let gt = &samples[rec.query_id];
        if !gt.gt_findings.get(cardio) || !rec.edits.iter().any(|e| e.removed == cardio && e.success) {
            continue;
        }
        let scores = localization_score(rec, &gt.gt_regions, cfg).map_err(|e| e.to_string())?;
        let s = scores.get(&cardio).ok_or("missing cardiomegaly score")?;
        n += 1;
        mass += s.mass_fraction;
        iou += s.iou;
    }
    Ok((n, if n == 0 { 0.0 } else { mass / n as f64 }, if n == 0 { 0.0 } else { iou / n as f64 }))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(dir).unwrap().to_path_buf())
        .collect();
    out.sort();
    out
}

fn determinism(best: &TrainedCheckpoint) -> Result<(bool, String), String> {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = CliConfig {
        seed: WORLD_SEED,
        world: world(),
        prevalence: Prevalence::Uniform(PREVALENCE),
        n_samples: N_SAMPLES,
        splits: SPLITS,
        generator: "a".into(),
        explain: ExplainConfig { limit: Some(12), ..Default::default() },
        ..Default::default()
    };
    let data = tmp.path().join("data");
    cmd_synth(&cfg, None, &data).map_err(|e| e.to_string())?;
    let model = tmp.path().join("model.json");
    fs::write(&model, serde_json::to_vec(best).unwrap()).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["run1", "run2"] {
        let out = tmp.path().join(name);
        cmd_explain(&cfg, None, &ModelRef::File(model.clone()), &QuerySource::Dataset(data.clone()), &out)
            .map_err(|e| e.to_string())?;
        runs.push(out);
    }
    let files = files_under(&runs[0]);
    if files != files_under(&runs[1]) {
        return Ok((false, "runs wrote different file sets".into()));
    }
    let compared: Vec<&PathBuf> = files.iter().filter(|f| !f.ends_with("run_manifest.json")).collect();
    let differing: Vec<String> = compared
        .iter()
        .filter(|f| fs::read(runs[0].join(f)).ok() != fs::read(runs[1].join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let panels = compared.iter().filter(|f| f.starts_with("panels")).count();
    let has_metrics = compared.iter().any(|f| f.ends_with("metrics.json"));
    Ok((
        differing.is_empty() && has_metrics && panels > 0,
        format!(
            "{} files compared incl. metrics.json and {panels} panels, {} differ{}; {:.0} s",
            compared.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) },
            secs(t0)
        ),
    ))
}

fn main() {
    let started = Instant::now();
    let mut lines = Vec::new();
    report(&mut lines, 1, "sampler algebra", sampler_algebra());
    report(&mut lines, 2, "gradient correctness", gradient_check());

    let vocab = world().vocabulary().unwrap();
    let cardio = vocab.require("cardiomegaly").unwrap();
    let atel = vocab.require("atelectasis").unwrap();
    let samples = sample_dataset(&world(), N_SAMPLES, &vec![PREVALENCE; vocab.len()]).unwrap();
    let gen_a = generator("a");
    let gen_b = generator("b");
    let data_a = prepare_dataset(&gen_a, &samples, SPLITS).unwrap();
    let data_b = prepare_dataset(&gen_b, &samples, SPLITS).unwrap();
    eprintln!(
        "world: {N_SAMPLES} samples at {IMAGE_SIZE}px, {} train / {} val / {} test; label disagreements a {} b {}",
        data_a.split_len(Split::Train),
        data_a.split_len(Split::Val),
        data_a.split_len(Split::Test),
        data_a.disagreements(),
        data_b.disagreements()
    );

    let tailored_a = train(&data_a, LabelSource::Tailored);
    report(
        &mut lines,
        3,
        "reconstruction fidelity",
        tailored_a.as_ref().map_err(Clone::clone).and_then(|t| {
            let (best, late) = (t.best()?, t.late()?);
            let steps: Vec<String> = t.checkpoints.iter().map(|c| format!("{}:{:.2}", c.step(), c.val_psnr)).collect();
            let n_train = data_a.split_len(Split::Train);
            let fast_enough = t.cached || t.seconds <= 1800.0;
            Ok((
                late.val_psnr >= 20.0 && late.step() >= 4000 && n_train >= 500 && fast_enough,
                format!(
                    "{n_train} train samples, val PSNR by step [{}], {:.2} dB after {} steps, selected {} at {:.2} dB; {}",
                    steps.join(" "),
                    late.val_psnr,
                    late.step(),
                    best.step(),
                    best.val_psnr,
                    timing(t)
                ),
            ))
        }),
    );
    let gt_a = train(&data_a, LabelSource::GroundTruth);
    let test_a: Vec<&DatasetRecord> = data_a.split(Split::Test).collect();
    let test_queries = queries(&test_a);
    let query_refs: Vec<(usize, &Image)> = test_queries.iter().map(|(i, q)| (*i, q)).collect();
    let ablation = (|| {
        let t = tailored_a.as_ref().map_err(Clone::clone)?;
        let g = gt_a.as_ref().map_err(Clone::clone)?;
        let variants = [
            (ModelVariant::TailoredBest, t.best()?),
            (ModelVariant::TailoredLate, t.late()?),
            (ModelVariant::Gt, g.best()?),
        ];
        let t0 = Instant::now();
        let out =
            run_ablation(&gen_a, &variants, &query_refs, &ExplainSettings::default()).map_err(|e| e.to_string())?;
        Ok::<_, String>((out, secs(t0) / 3.0, timing(g)))
    })();

    report(
        &mut lines,
        4,
        "cyclic success",
        ablation.as_ref().map_err(Clone::clone).and_then(|((rep, _), per_variant, _)| {
            let row = rep.row(ModelVariant::TailoredBest).ok_or("missing tailored-best row")?;
            let s = &row.report;
            let per: Vec<String> =
                s.per_finding.iter().map(|(k, t)| format!("{k} {}/{}", t.successes, t.manipulations)).collect();
            Ok((
                s.n_images >= 100 && s.n_manipulations >= 140 && s.success_rate >= 0.6 && *per_variant <= 900.0,
                format!(
                    "{} queries, {} manipulations, {} successes, rate {:.3} [{}]; explained in {:.0} s",
                    s.n_images,
                    s.n_manipulations,
                    s.n_success,
                    s.success_rate,
                    per.join(", "),
                    per_variant
                ),
            ))
        }),
    );

    report(
        &mut lines,
        5,
        "ablation ordering",
        ablation.as_ref().map_err(Clone::clone).and_then(|((rep, _), _, gt_timing)| {
            let rate = |v| rep.row(v).map(|r| (r.report.success_rate, r.checkpoint_step)).ok_or("missing row");
            let (best, best_step) = rate(ModelVariant::TailoredBest)?;
            let (late, late_step) = rate(ModelVariant::TailoredLate)?;
            let (gt, gt_step) = rate(ModelVariant::Gt)?;
            Ok((
                best > gt && best - gt >= 0.02 && best >= late,
                format!(
                    "tailored-best {best:.3} (step {best_step}), tailored-late {late:.3} (step {late_step}), gt {gt:.3} (step {gt_step}); gap to gt {:.3} over {} shared manipulations; gt {gt_timing}",
                    best - gt,
                    rep.manipulations.len()
                ),
            ))
        }),
    );

    report(&mut lines, 6, "frame pipeline exactness", frame_exactness());

    report(
        &mut lines,
        7,
        "localization",
        ablation.as_ref().map_err(Clone::clone).and_then(|((_, records), _, _)| {
            // The frame threshold for cardiomegaly is chosen on validation
            // queries, then scored on the test records.
            let t = tailored_a.as_ref().map_err(Clone::clone)?;
            let (schedule, net) = t.best()?.checkpoint.restore().map_err(|e| e.to_string())?;
            let explainer = Explainer {
                restrict: Some(vocab.vector_of(&["cardiomegaly"]).unwrap()),
                ..Explainer::new(&net, &schedule, &gen_a).map_err(|e| e.to_string())?
            };
            let val = queries(&data_a.split(Split::Val).collect::<Vec<_>>());
            let val_refs: Vec<(usize, &Image)> = val.iter().map(|(i, q)| (*i, q)).collect();
            let val_records =
                explainer.explain_all(&val_refs).into_iter().collect::<cvla::Result<Vec<_>>>().map_err(|e| e.to_string())?;
            let with_level = |level: f64| FrameConfig {
                finding_thresholds: BTreeMap::from([("cardiomegaly".to_string(), level)]),
                ..FrameConfig::default()
            };
            let mut chosen = (95.0, f64::NEG_INFINITY, 0);
            for level in (10..=250).step_by(5).map(f64::from) {
                let (n, _, iou) = cardiomegaly_localization(&val_records, &samples, &with_level(level), cardio, usize::MAX)?;
                if iou > chosen.1 {
                    chosen = (level, iou, n);
                }
            }
            let (n95, mass95, iou95) = cardiomegaly_localization(&records[0], &samples, &FrameConfig::default(), cardio, 50)?;
            let (n, mass, iou) = cardiomegaly_localization(&records[0], &samples, &with_level(chosen.0), cardio, 50)?;
            Ok((
                n >= 50 && mass >= 0.5 && iou >= 0.3,
                format!(
                    "threshold {} chosen on {} validation removals; {n} test removals: mass {mass:.3}, IoU {iou:.3}; at the default 95: mass {mass95:.3}, IoU {iou95:.3} over {n95}",
                    chosen.0, chosen.2
                ),
            ))
        }),
    );

    report(
        &mut lines,
        8,
        "determinism",
        tailored_a.as_ref().map_err(Clone::clone).and_then(|t| determinism(t.best()?)),
    );
    report(&mut lines, 9, "prompt grammar", prompt_grammar());

    let tailored_b = train(&data_b, LabelSource::Tailored);
    report(
        &mut lines,
        10,
        "cross-generator scenario",
        tailored_b.as_ref().map_err(Clone::clone).and_then(|t| {
            let best = t.best()?;
            let (schedule, net) = best.checkpoint.restore().map_err(|e| e.to_string())?;
            let explainer = Explainer::new(&net, &schedule, &gen_b).map_err(|e| e.to_string())?;
            let test_b: Vec<&DatasetRecord> = data_b.split(Split::Test).collect();
            let fp: Vec<&DatasetRecord> =
                test_b.iter().copied().filter(|r| r.inferred.get(atel) && !r.gt.get(atel)).collect();
            let fp_queries = queries(&fp);
            let refs: Vec<(usize, &Image)> = fp_queries.iter().map(|(i, q)| (*i, q)).collect();
            let records =
                explainer.explain_all(&refs).into_iter().collect::<cvla::Result<Vec<_>>>().map_err(|e| e.to_string())?;
            let removed_ok: Vec<usize> = records
                .iter()
                .filter(|r| r.edits.iter().any(|e| e.removed == atel && e.success))
                .map(|r| r.query_id)
                .collect();
            let a_calls = test_a.iter().filter(|r| r.inferred.get(atel)).count();
            let all_b = cvla::evalx::success_rate(&records).map_err(|e| e.to_string())?;
            Ok((
                !removed_ok.is_empty(),
                format!(
                    "generator b calls atelectasis on {} test queries ({} false positives, generator a calls {}); false-positive removals succeeded on {} queries {:?}; all edits on those queries {}/{}; model step {} {}",
                    test_b.iter().filter(|r| r.inferred.get(atel)).count(),
                    fp.len(),
                    a_calls,
                    removed_ok.len(),
                    removed_ok,
                    all_b.n_success,
                    all_b.n_manipulations,
                    best.step(),
                    timing(t)
                ),
            ))
        }),
    );

    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| format!("{} {}", l.id, l.name)).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s{}",
        lines.len() - failed.len(),
        lines.len(),
        secs(started),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
