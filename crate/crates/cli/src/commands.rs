use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use amber_afno::data_io::{
    generate_dataset, generate_phantom, load_checkpoint, load_dataset, make_splits, read_checkpoint_manifest,
    read_mask, sample_stems, save_dataset, write_mask, CheckpointManifest, PhantomSpec, Sample,
};
use amber_afno::metrics::{aggregate, evaluate, LabelMask, MetricReport};
use amber_afno::model::{buffer_specs, param_specs};
use amber_afno::model_stats::{count_flops, count_params, CostBreakdown};
use amber_afno::train::{stack_batch, train as run_training, TrainReport};
use amber_afno::{Mixing, Model, ModelConfig, RunConfig, Scalar};
use serde::Serialize;

use crate::manifest::{self, write_json, write_text};
use crate::{load_config, CliError, CliResult, GlobalArgs};

fn create_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

pub fn print_config(g: &GlobalArgs) -> CliResult<()> {
    let cfg = load_config(g)?;
    cfg.validate()?;
    let text = toml::to_string(&cfg).map_err(|e| CliError::runtime(e.to_string()))?;
    print!("{text}");
    Ok(())
}

pub fn gen_data(g: &GlobalArgs, samples: Option<usize>) -> CliResult<()> {
    let mut cfg = load_config(g)?;
    if let Some(n) = samples {
        cfg.data.samples = n;
    }
    cfg.data.dir = None;
    cfg.validate()?;
    let out = create_out(&cfg)?;
    let data = generate_dataset(&cfg.data.phantom, cfg.data.samples)?;
    let index = save_dataset(&out, &data, cfg.data.phantom.spacing)?;
    let m = manifest::write(&out, "gen-data", &cfg)?;
    println!("wrote {} samples ({} files) to {}", index.samples.len(), m.files.len(), out.display());
    Ok(())
}

/// Samples and voxel spacing from `data.dir`, or freshly generated phantoms.
fn load_samples(cfg: &RunConfig) -> CliResult<(Vec<Sample>, [f64; 3])> {
    match &cfg.data.dir {
        Some(dir) => {
            let (index, samples) = load_dataset(dir)?;
            if samples.is_empty() {
                return Err(CliError::runtime(format!("no samples in {}", dir.display())));
            }
            if index.grid != cfg.model.input_shape {
                return Err(CliError::validation(format!(
                    "model.input_shape {:?} differs from the grid {:?} of {}",
                    cfg.model.input_shape,
                    index.grid,
                    dir.display()
                )));
            }
            Ok((samples, index.spacing))
        }
        None => Ok((generate_dataset(&cfg.data.phantom, cfg.data.samples)?, cfg.data.phantom.spacing)),
    }
}

#[derive(Serialize)]
struct StatsSection {
    mixing: Mixing,
    input_shape: [usize; 3],
    param_count: u64,
    flops: u64,
    mixer_params: u64,
    mixer_flops: u64,
}

fn stats_section(model: &ModelConfig, params: &CostBreakdown) -> CliResult<StatsSection> {
    let flops = count_flops(model, model.input_shape)?;
    let (mixer_params, mixer_flops) = flops.sum_matching(".mixer");
    Ok(StatsSection {
        mixing: model.mixing,
        input_shape: model.input_shape,
        param_count: params.total_params,
        flops: flops.total_flops,
        mixer_params,
        mixer_flops,
    })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    train_samples: usize,
    held_out_samples: usize,
    steps: usize,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    final_dsc: Option<f64>,
    stats: StatsSection,
    report: &'a TrainReport,
}

pub fn train(
    g: &GlobalArgs,
    epochs: Option<usize>,
    max_steps: Option<usize>,
    lr: Option<f64>,
    data: Option<PathBuf>,
) -> CliResult<()> {
    let mut cfg = load_config(g)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
    }
    if let Some(lr) = lr {
        cfg.train.learning_rate = lr;
    }
    if data.is_some() {
        cfg.data.dir = data;
    }
    cfg.validate()?;
    let (samples, _) = load_samples(&cfg)?;
    let (train_idx, test_idx) = make_splits(samples.len(), cfg.data.train_fraction, cfg.train.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train_set, test_set) = (pick(&train_idx), pick(&test_idx));
    let out = create_out(&cfg)?;
    match cfg.precision {
        64 => train_as::<f64>(&cfg, &out, &train_set, &test_set),
        _ => train_as::<f32>(&cfg, &out, &train_set, &test_set),
    }
}

fn train_as<T: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    train_set: &[Sample],
    test_set: &[Sample],
) -> CliResult<()> {
    let mut model = Model::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    let params = count_params(&model);
    eprintln!(
        "training {} model: {} parameters, {} train / {} held-out samples",
        cfg.model.mixing,
        params.total_params,
        train_set.len(),
        test_set.len()
    );
    let report = run_training(&mut model, train_set, test_set, &cfg.train, Some(out), &mut |r| {
        let dsc = r.held_out_dsc.map(|d| format!(", held-out DSC {d:.4}")).unwrap_or_default();
        eprintln!("epoch {:>4}  step {:>6}  loss {:.6}{dsc}  ({:.2}s)", r.epoch, r.step, r.mean_loss, r.seconds);
    })?;
    let summary = TrainSummary {
        train_samples: train_set.len(),
        held_out_samples: test_set.len(),
        steps: report.step_losses.len(),
        first_loss: report.step_losses.first().copied(),
        last_loss: report.step_losses.last().copied(),
        final_dsc: report.final_dsc,
        stats: stats_section(&cfg.model, &params)?,
        report: &report,
    };
    write_json(&out.join("report.json"), &summary)?;
    write_config(out, cfg)?;
    manifest::write(out, "train", cfg)?;
    println!(
        "done: {} steps, final loss {:.6}, held-out DSC {}",
        summary.steps,
        summary.last_loss.unwrap_or(f64::NAN),
        summary.final_dsc.map(|d| format!("{d:.4}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn write_config(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let text = toml::to_string(cfg).map_err(|e| CliError::runtime(e.to_string()))?;
    write_text(&out.join("config.toml"), &text)
}

/// Every tensor whose presence or shape differs between a configuration
/// and a stored checkpoint.
pub fn shape_diff(cfg: &ModelConfig, stored: &CheckpointManifest) -> Vec<String> {
    let have: BTreeMap<&str, &Vec<usize>> = stored.tensors.iter().map(|t| (t.name.as_str(), &t.shape)).collect();
    let specs: Vec<_> = param_specs(cfg).into_iter().chain(buffer_specs(cfg)).collect();
    let mut lines = Vec::new();
    for s in &specs {
        match have.get(s.name.as_str()) {
            None => lines.push(format!("  {}: missing from checkpoint, config needs {:?}", s.name, s.shape)),
            Some(shape) if **shape != s.shape => {
                lines.push(format!("  {}: checkpoint {:?}, config {:?}", s.name, shape, s.shape))
            }
            _ => {}
        }
    }
    for t in &stored.tensors {
        if !specs.iter().any(|s| s.name == t.name) {
            lines.push(format!("  {}: not in config, checkpoint has {:?}", t.name, t.shape));
        }
    }
    lines
}

#[derive(Serialize)]
struct SampleRow {
    id: String,
    metrics: MetricReport,
}

pub fn eval(
    g: &GlobalArgs,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    pred_dir: Option<PathBuf>,
) -> CliResult<()> {
    let cfg = load_config(g)?;
    let data_dir = data
        .or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| CliError::validation("no dataset: pass --data or set data.dir"))?;
    if pred_dir.is_none() && checkpoint.is_none() {
        return Err(CliError::validation("pass --checkpoint or --pred-dir"));
    }
    let (index, samples) = load_dataset(&data_dir)?;
    if samples.is_empty() {
        return Err(CliError::runtime(format!("no samples in {}", data_dir.display())));
    }

    let preds: Vec<LabelMask> = match (&pred_dir, &checkpoint) {
        (Some(dir), _) => index
            .samples
            .iter()
            .map(|id| Ok(read_mask(&sample_stems(dir, id).1)?.0))
            .collect::<CliResult<_>>()?,
        (None, Some(ckpt)) => {
            let stored = read_checkpoint_manifest(ckpt)?;
            let model_cfg = if g.config.is_some() { cfg.model.clone() } else { stored.config.clone() };
            model_cfg.validate()?;
            let diff = shape_diff(&model_cfg, &stored);
            if !diff.is_empty() {
                return Err(CliError::validation(format!(
                    "checkpoint {} does not match the model configuration:\n{}",
                    ckpt.display(),
                    diff.join("\n")
                )));
            }
            if index.grid != model_cfg.input_shape {
                return Err(CliError::validation(format!(
                    "model input_shape {:?} differs from the grid {:?} of {}",
                    model_cfg.input_shape,
                    index.grid,
                    data_dir.display()
                )));
            }
            match cfg.precision {
                64 => infer::<f64>(model_cfg, ckpt, &samples)?,
                _ => infer::<f32>(model_cfg, ckpt, &samples)?,
            }
        }
        (None, None) => unreachable!(),
    };

    let mut rows = Vec::new();
    for ((id, s), p) in index.samples.iter().zip(&samples).zip(&preds) {
        let metrics = evaluate(p, &s.label, index.spacing).map_err(|e| CliError::runtime(format!("{id}: {e}")))?;
        rows.push(SampleRow { id: id.clone(), metrics });
    }
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.metrics.clone()).collect();
    let agg = aggregate(&reports).ok_or_else(|| CliError::runtime("no samples"))?;

    let out = create_out(&cfg)?;
    if pred_dir.is_none() {
        for (id, p) in index.samples.iter().zip(&preds) {
            write_mask(&sample_stems(&out.join("predictions"), id).1, p, index.spacing)?;
        }
    }
    write_json(&out.join("per_sample.json"), &rows)?;
    write_json(&out.join("aggregate.json"), &agg)?;
    let table = metric_table(&rows, &agg);
    write_text(&out.join("eval.txt"), &table)?;
    manifest::write(&out, "eval", &cfg)?;
    print!("{table}");
    Ok(())
}

fn infer<T: Scalar>(model_cfg: ModelConfig, ckpt: &Path, samples: &[Sample]) -> CliResult<Vec<LabelMask>> {
    let c = load_checkpoint::<T>(ckpt)?;
    let model = Model::from_parts(model_cfg, c.params, c.buffers)?;
    samples
        .iter()
        .map(|s| {
            let (x, _) = stack_batch::<T>(&[s])?;
            Ok(model.predict(&x)?.remove(0))
        })
        .collect()
}

fn fmt_hd(v: Option<f64>) -> String {
    v.map(|d| format!("{d:.4}")).unwrap_or_else(|| "undef".into())
}

fn metric_table(rows: &[SampleRow], agg: &MetricReport) -> String {
    let w = rows.iter().map(|r| r.id.len()).max().unwrap_or(6).max(9);
    let mut s = format!("{:<w$}  {:>8}  {:>10}\n", "sample", "DSC", "HD95");
    for r in rows {
        s += &format!("{:<w$}  {:>8.4}  {:>10}\n", r.id, r.metrics.mean_dsc, fmt_hd(r.metrics.mean_hd95));
    }
    s += &format!("{:<w$}  {:>8.4}  {:>10}\n", "aggregate", agg.mean_dsc, fmt_hd(agg.mean_hd95));
    s
}

fn parse_shape(text: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<&str> = text.trim().split('x').collect();
    let bad = || CliError::validation(format!("shape {text:?}: expected DxHxW"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut shape = [0; 3];
    for (s, p) in shape.iter_mut().zip(parts) {
        *s = p.parse().map_err(|_| bad())?;
    }
    Ok(shape)
}

#[derive(Serialize)]
struct StatsFile {
    input_shape: [usize; 3],
    mixing: Mixing,
    breakdown: CostBreakdown,
}

pub fn stats(g: &GlobalArgs, input: Option<String>) -> CliResult<()> {
    let cfg = load_config(g)?;
    cfg.validate()?;
    let input = input.as_deref().map(parse_shape).transpose()?.unwrap_or(cfg.model.input_shape);
    cfg.model.validate_shape(input)?;
    let closed = count_flops(&cfg.model, input)?;
    let enumerated = count_params(&Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?);
    let by_layer: Vec<_> = closed.entries.iter().map(|e| (&e.name, e.params)).collect();
    let counted: Vec<_> = enumerated.entries.iter().map(|e| (&e.name, e.params)).collect();
    if by_layer != counted {
        return Err(CliError::runtime("closed-form parameter counts disagree with the instantiated model"));
    }
    let out = create_out(&cfg)?;
    let table = format!(
        "mixing {}  input {}x{}x{}\n{}",
        cfg.model.mixing,
        input[0],
        input[1],
        input[2],
        closed.to_table()
    );
    write_text(&out.join("stats.txt"), &table)?;
    write_json(&out.join("stats.json"), &StatsFile { input_shape: input, mixing: cfg.model.mixing, breakdown: closed })?;
    manifest::write(&out, "stats", &cfg)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    shape: [usize; 3],
    params: u64,
    flops: u64,
    reps: usize,
    forward_ms: f64,
    train_step_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms(reps: usize, mut f: impl FnMut() -> CliResult<()>) -> CliResult<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

fn bench_shape<T: Scalar>(cfg: &RunConfig, shape: [usize; 3], reps: usize) -> CliResult<BenchRow> {
    let model_cfg = ModelConfig { input_shape: shape, ..cfg.model.clone() };
    let phantom = PhantomSpec { grid: shape, ..cfg.data.phantom.clone() };
    let sample = generate_phantom(&phantom)?;
    let model = Model::<T>::new(model_cfg.clone(), cfg.train.seed)?;
    let (x, labels) = stack_batch::<T>(&[&sample])?;
    let w = &cfg.train.deep_supervision_weights;
    let forward_ms = time_ms(reps, || {
        model.forward(&x)?;
        Ok(())
    })?;
    let train_step_ms = time_ms(reps, || {
        model.loss_and_grads(&x, &labels, w, cfg.train.dice_eps, true)?;
        Ok(())
    })?;
    Ok(BenchRow {
        shape,
        params: model.param_count(),
        flops: count_flops(&model_cfg, shape)?.total_flops,
        reps,
        forward_ms,
        train_step_ms,
    })
}

pub fn bench(g: &GlobalArgs, shapes: Option<String>, reps: usize) -> CliResult<()> {
    let cfg = load_config(g)?;
    cfg.validate()?;
    if reps < 5 {
        return Err(CliError::validation(format!("--reps must be at least 5, got {reps}")));
    }
    let shapes: Vec<[usize; 3]> = match shapes {
        Some(s) => s.split(',').map(parse_shape).collect::<CliResult<_>>()?,
        None => vec![cfg.model.input_shape],
    };
    let mut rows = Vec::new();
    for &shape in &shapes {
        let row = match cfg.precision {
            64 => bench_shape::<f64>(&cfg, shape, reps),
            _ => bench_shape::<f32>(&cfg, shape, reps),
        };
        match row {
            Ok(r) => rows.push(r),
            Err(e) => eprintln!("warning: skipping {}x{}x{}: {}", shape[0], shape[1], shape[2], e.message),
        }
    }
    if rows.is_empty() {
        return Err(CliError::validation("every shape in the sweep was rejected"));
    }
    let out = create_out(&cfg)?;
    let mut table = format!(
        "{:<14}  {:>10}  {:>14}  {:>12}  {:>14}\n",
        "shape", "params", "flops", "forward_ms", "train_step_ms"
    );
    for r in &rows {
        let s = format!("{}x{}x{}", r.shape[0], r.shape[1], r.shape[2]);
        table += &format!(
            "{s:<14}  {:>10}  {:>14}  {:>12.3}  {:>14.3}\n",
            r.params, r.flops, r.forward_ms, r.train_step_ms
        );
    }
    write_text(&out.join("bench.txt"), &table)?;
    write_json(&out.join("bench.json"), &rows)?;
    manifest::write(&out, "bench", &cfg)?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("16x8x4").unwrap(), [16, 8, 4]);
        assert!(parse_shape("16x8").is_err());
        assert!(parse_shape("ax8x4").is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn diff_lists_every_mismatch() {
        let cfg = ModelConfig::tiny();
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
        let stored =
            amber_afno::data_io::save_checkpoint(dir.path(), &cfg, model.params(), model.buffers()).unwrap();
        assert!(shape_diff(&cfg, &stored).is_empty());
        let wider = ModelConfig { dims: vec![4, 8, 12, 20], ..cfg };
        let diff = shape_diff(&wider, &stored);
        assert!(!diff.is_empty());
        assert!(diff.iter().all(|l| l.contains("checkpoint")), "{diff:?}");
        assert!(diff.iter().any(|l| l.contains("encoder.stage3.patch.weight")), "{diff:?}");
    }
}
