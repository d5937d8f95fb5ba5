use std::io::Write;
use std::path::Path;
use std::time::Instant;

use cmsr_core::checkpoint::{self, model_from_tensors, student_from_tensors, student_to_tensors, teacher_from_tensors, teacher_to_tensors};
use cmsr_core::data::{ingest, read_png, upsample_x4, write_png, CropMode, Dataset, DatasetManifest, Split};
use cmsr_core::denoiser::{DenoiserModel, UPSCALE};
use cmsr_core::distill::{distill_steps, train_teacher, CdContext, TeacherState, TrainState};
use cmsr_core::metrics::{improvement_report, ProxyExtractor};
use cmsr_core::samplers::{cm_sample, ddim_sample, ddpm_sample, default_cm_times, SampleOutput, SamplerRun, Student};
use cmsr_core::schedule::TimestepMap;
use cmsr_core::verify::{model_suite, primitive_suite, GRAD_TOLERANCE};
use cmsr_core::Tensor;

use crate::config::{Config, CropKind, SamplerKind};
use crate::store::{self, split_dir, split_name};
use crate::{CliError, EtlArgs, EvalArgs, GradcheckArgs, Inject, SplitArg, SuperresArgs, TrainArgs, DistillArgs};

// Offsets separating the random streams of each command under one master seed.
const TEACHER_STREAM: u64 = 1;
const DISTILL_STREAM: u64 = 2;
const SAMPLING_STREAM: u64 = 3;

fn stream(cfg: &Config, offset: u64) -> u64 {
    cfg.seed.wrapping_add(offset)
}

fn split_of(arg: SplitArg) -> Split {
    match arg {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

pub fn etl(cfg: &Config, a: &EtlArgs) -> Result<(), CliError> {
    let split = split_of(a.split);
    let size = cfg.data.image_size;
    let (manifest, records, skipped) = match &a.input {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::Data(format!("input directory {} does not exist", dir.display())));
            }
            let mode = match cfg.data.crop {
                CropKind::Center => CropMode::Center,
                CropKind::Random => CropMode::Random { seed: cfg.seed },
            };
            let out = ingest(dir, size, mode, split)?;
            for s in &out.skipped {
                eprintln!("skipped {}: {}", s.path.display(), s.reason);
            }
            if out.records.is_empty() {
                return Err(CliError::Data(format!("no usable RGB images in {}", dir.display())));
            }
            (out.manifest, out.records, out.skipped.len())
        }
        None => {
            let records = store::synthetic_records(cfg, split)?;
            let seed = match split {
                Split::Train => cfg.data.train_seed,
                Split::Test => cfg.data.test_seed,
            };
            let mut records = records;
            records.sort_by(|x, y| x.id.cmp(&y.id));
            (DatasetManifest::describe(split, size, seed, &records), records, 0)
        }
    };
    let dir = split_dir(cfg, split);
    std::fs::create_dir_all(&dir)?;
    store::save_split(&dir, &manifest, &records)?;
    println!(
        "etl {}: kept {} skipped {} manifest {} checksum {:016x}",
        split_name(split),
        records.len(),
        skipped,
        dir.join(store::MANIFEST_FILE).display(),
        manifest.checksum()
    );
    Ok(())
}

fn step_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

/// Next step at which to stop: the following checkpoint boundary or the budget.
fn next_stop(step: u64, every: u64, budget: u64) -> u64 {
    if every == 0 {
        budget
    } else {
        ((step / every + 1) * every).min(budget)
    }
}

fn report_final(kind: &str, path: &Path, step: u64, last_loss: Option<f64>) -> Result<(), CliError> {
    let loss = last_loss.map_or("n/a".to_owned(), |l| format!("{l:.6}"));
    println!(
        "{kind}: step {step} last loss {loss} checkpoint {} checksum {}",
        path.display(),
        store::file_checksum(path)?
    );
    Ok(())
}

pub fn train(cfg: &Config, a: &TrainArgs) -> Result<(), CliError> {
    let schedule = cfg.noise_schedule()?;
    let data = store::dataset(cfg, Split::Train)?;
    let hp = cfg.teacher_hyper_params();
    let budget = a.steps.unwrap_or(cfg.teacher.steps);
    let (mut state, resumed) = match &a.resume {
        Some(p) => {
            let s = teacher_from_tensors(&checkpoint::load(p)?, Some(&cfg.model))?;
            let k = s.step;
            (s, Some(k))
        }
        None => (TeacherState::new(DenoiserModel::new(cfg.model, cfg.seed)?), None),
    };
    if state.step > budget {
        return Err(CliError::Usage(format!("checkpoint is at step {}, beyond the budget {budget}", state.step)));
    }
    let dir = cfg.output_dir.join("teacher");
    std::fs::create_dir_all(&dir)?;
    let mut curve = Vec::new();
    let start = Instant::now();
    while state.step < budget {
        let stop = next_stop(state.step, cfg.teacher.checkpoint_every, budget);
        let part = train_teacher(&mut state, &data, &schedule, &hp, stop, stream(cfg, TEACHER_STREAM));
        let part = match part {
            Ok(p) => p,
            Err(e) => {
                store::write_loss_curve(&dir.join("loss.jsonl"), &curve, resumed)?;
                return Err(e.into());
            }
        };
        curve.extend(part);
        if stop < budget {
            checkpoint::save(&dir.join(step_name(stop)), &teacher_to_tensors(&state))?;
        }
        let loss = curve.last().map_or(f64::NAN, |r| r.loss);
        eprintln!("teacher step {stop}/{budget} loss {loss:.5} ({:.0}s)", start.elapsed().as_secs_f64());
    }
    let path = dir.join("final.ckpt");
    checkpoint::save(&path, &teacher_to_tensors(&state))?;
    store::write_loss_curve(&dir.join("loss.jsonl"), &curve, resumed)?;
    report_final("teacher", &path, state.step, curve.last().map(|r| r.loss))
}

pub fn distill(cfg: &Config, a: &DistillArgs) -> Result<(), CliError> {
    let schedule = cfg.noise_schedule()?;
    let data = store::dataset(cfg, Split::Train)?;
    let teacher = teacher_from_tensors(&checkpoint::load(&a.teacher)?, Some(&cfg.model))?.model;
    let hp = cfg.hyper_params();
    let map = cfg.timestep_map(&schedule)?;
    let scalings = cfg.scalings();
    let ctx = CdContext { teacher: &teacher, map: &map, schedule: &schedule, scalings: &scalings, hp: &hp };
    let budget = a.steps.unwrap_or(cfg.distill.steps);
    let (mut state, resumed) = match &a.resume {
        Some(p) => {
            let (_, s) = student_from_tensors(&checkpoint::load(p)?, Some(&cfg.model))?;
            let k = s.step;
            (s, Some(k))
        }
        None => (TrainState::from_teacher(&teacher, &hp), None),
    };
    if state.step > budget {
        return Err(CliError::Usage(format!("checkpoint is at step {}, beyond the budget {budget}", state.step)));
    }
    let dir = cfg.output_dir.join("student");
    std::fs::create_dir_all(&dir)?;
    let mut curve = Vec::new();
    let start = Instant::now();
    while state.step < budget {
        let stop = next_stop(state.step, cfg.distill.checkpoint_every, budget);
        let part = match distill_steps(&mut state, &ctx, &data, stop, stream(cfg, DISTILL_STREAM)) {
            Ok(p) => p,
            Err(e) => {
                store::write_loss_curve(&dir.join("loss.jsonl"), &curve, resumed)?;
                return Err(e.into());
            }
        };
        curve.extend(part);
        if stop < budget {
            checkpoint::save(&dir.join(step_name(stop)), &student_to_tensors(&state, &cfg.model))?;
        }
        let loss = curve.last().map_or(f64::NAN, |r| r.loss);
        eprintln!("distill step {stop}/{budget} loss {loss:.6} ({:.0}s)", start.elapsed().as_secs_f64());
    }
    let path = dir.join("final.ckpt");
    checkpoint::save(&path, &student_to_tensors(&state, &cfg.model))?;
    store::write_loss_curve(&dir.join("loss.jsonl"), &curve, resumed)?;
    report_final("student", &path, state.step, curve.last().map(|r| r.loss))
}

/// Runs the chosen sampler for a batch of conditions. Samples are clamped to
/// the data range; the consistency function already does so.
pub fn sample(
    cfg: &Config,
    model: &DenoiserModel,
    cond: &Tensor,
    sampler: SamplerKind,
    steps: Option<usize>,
    stride: Option<usize>,
    seed: u64,
) -> Result<SampleOutput, CliError> {
    let schedule = cfg.noise_schedule()?;
    let (n, c, h, w) = cond.dims4()?;
    let shape = [n, c, h * UPSCALE, w * UPSCALE];
    let run = SamplerRun::new(seed).with_eta(cfg.sampling.eta);
    let mut out = match sampler {
        SamplerKind::Ddpm => ddpm_sample(model, cond, &shape, &schedule, &run)?,
        SamplerKind::Ddim => {
            let map = match stride {
                Some(s) => TimestepMap::strided(&schedule, s)?,
                None => TimestepMap::even(&schedule, steps.unwrap_or(50))?,
            };
            ddim_sample(model, cond, &shape, &schedule, &map, &run)?
        }
        SamplerKind::Cm => {
            let times = default_cm_times(&schedule, steps.unwrap_or(cfg.sampling.steps))?;
            let f = Student { model, scalings: cfg.scalings(), schedule: &schedule };
            cm_sample(&f, cond, &shape, &schedule, &times, &run)?
        }
    };
    out.sample = out.sample.map(|v| v.clamp(-1.0, 1.0));
    Ok(out)
}

fn default_steps(cfg: &Config, sampler: SamplerKind, steps: Option<usize>) -> Option<usize> {
    steps.or((sampler == cfg.sampling.sampler).then_some(cfg.sampling.steps))
}

pub fn superres(cfg: &Config, a: &SuperresArgs) -> Result<(), CliError> {
    let model = model_from_tensors(&checkpoint::load(&a.checkpoint)?, None)?;
    let lowres = read_png(&a.input)?;
    let expected = cfg.data.image_size / UPSCALE;
    let (h, w) = (lowres.shape()[1], lowres.shape()[2]);
    if (h, w) != (expected, expected) {
        return Err(CliError::Usage(format!(
            "input {} is {w}x{h}; the model expects {expected}x{expected} (data.image_size / {UPSCALE})",
            a.input.display()
        )));
    }
    let cond = lowres.reshape(&[1, 3, h, w])?;
    let sampler = a.sampler.unwrap_or(cfg.sampling.sampler);
    let steps = default_steps(cfg, sampler, a.steps);
    let start = Instant::now();
    let out = sample(cfg, &model, &cond, sampler, steps, a.stride, stream(cfg, SAMPLING_STREAM))?;
    let wall = start.elapsed().as_secs_f64();
    write_png(&a.output, &out.sample)?;
    println!(
        "superres: sampler {} evaluations {} wall_time_s {wall:.3} output {} ({}x{})",
        format!("{sampler:?}").to_lowercase(),
        out.evaluations,
        a.output.display(),
        w * UPSCALE,
        h * UPSCALE
    );
    Ok(())
}

fn items(t: &Tensor) -> Result<Vec<Tensor>, CliError> {
    let n = t.shape()[0];
    Ok((0..n).map(|i| t.batch_item(i)).collect::<Result<_, _>>()?)
}

/// Upscales every test condition in batches of 32, each batch with its own stream.
fn upscale_all(cfg: &Config, model: &DenoiserModel, data: &Dataset, sampler: SamplerKind, steps: Option<usize>) -> Result<(Vec<Tensor>, usize), CliError> {
    let mut outputs = Vec::with_capacity(data.len());
    let mut evaluations = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in indices.chunks(32).enumerate() {
        let (_, cond) = data.batch(chunk)?;
        let seed = stream(cfg, SAMPLING_STREAM).wrapping_add((b as u64) << 32);
        let out = sample(cfg, model, &cond, sampler, steps, None, seed)?;
        evaluations = out.evaluations;
        outputs.extend(items(&out.sample)?);
    }
    Ok((outputs, evaluations))
}

pub fn eval(cfg: &Config, a: &EvalArgs) -> Result<(), CliError> {
    let data = store::dataset(cfg, Split::Test)?;
    let (refs, conds) = data.all()?;
    let references = items(&refs)?;
    let baseline = items(&upsample_x4(&conds)?)?;
    let sampler = a.sampler.unwrap_or(cfg.sampling.sampler);
    let (outputs, evaluations) = match (a.inject, &a.checkpoint) {
        (Some(Inject::Reference), _) => (references.clone(), 0),
        (Some(Inject::Baseline), _) => (baseline.clone(), 0),
        (None, Some(path)) => {
            let model = model_from_tensors(&checkpoint::load(path)?, None)?;
            upscale_all(cfg, &model, &data, sampler, default_steps(cfg, sampler, a.steps))?
        }
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --inject".into())),
    };
    let report = improvement_report(&references, &outputs, &baseline, &ProxyExtractor::default())?;
    let dir = cfg.output_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    let mut json = serde_json::to_value(&report).expect("report serializes");
    json["sampler"] = match a.inject {
        Some(i) => format!("inject-{i:?}").to_lowercase(),
        None => format!("{sampler:?}").to_lowercase(),
    }
    .into();
    json["evaluations"] = evaluations.into();
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&json).expect("report serializes") + "\n")?;
    let mut scores = std::io::BufWriter::new(std::fs::File::create(dir.join("scores.jsonl"))?);
    for (s, r) in report.images.iter().zip(&data.records) {
        let line = serde_json::json!({ "id": r.id, "psnr_model": s.psnr_model, "psnr_baseline": s.psnr_baseline });
        writeln!(scores, "{line}")?;
    }
    scores.flush()?;
    let mut summary = report.summary_table();
    summary += &format!("{:<34}{:>14}\n", "denoiser evaluations per image", evaluations);
    std::fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn gradcheck(cfg: &Config, a: &GradcheckArgs) -> Result<(), CliError> {
    let mut reports = primitive_suite()?;
    reports.extend(model_suite(cfg.model, cfg.data.image_size, a.coords.max(1))?);
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!("{:<28} {:>12.3e} {}", r.name, r.max_relative_error, if r.passed() { "ok" } else { "FAIL" });
        worst = worst.max(r.max_relative_error);
    }
    if worst >= GRAD_TOLERANCE {
        return Err(cmsr_core::Error::Numeric(format!(
            "largest relative gradient error {worst:.3e} exceeds {GRAD_TOLERANCE:.0e}"
        ))
        .into());
    }
    println!("gradcheck: {} checks passed, largest relative error {worst:.3e}", reports.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_stops() {
        assert_eq!(next_stop(0, 100, 250), 100);
        assert_eq!(next_stop(100, 100, 250), 200);
        assert_eq!(next_stop(200, 100, 250), 250);
        assert_eq!(next_stop(37, 0, 250), 250);
    }
}
