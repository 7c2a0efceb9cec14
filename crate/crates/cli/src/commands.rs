//! Subcommand bodies. Each writes into `<run>/<command>/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talkflow_core::context::{save_dataset, synth_dataset, CoeffSequence, SignalAudio};
use talkflow_core::generators::{
    all_frames, emotion_transfer, rollout_expression, rollout_pose, write_csv, ExpFlowModel,
    ExpFlowObjective, Objective, PoseFlowModel, PoseFlowObjective, RolloutOptions, SamplingMode,
    Trainer,
};
use talkflow_core::{Error, Result};
use talkflow_vq::autoencoder::PatchAutoencoder;
use talkflow_vq::codebook::index_map_csv;
use talkflow_vq::patches::{render, stack_images, FaceIdentity, Motion};
use talkflow_vq::train::{AeObjective, VqigObjective};
use talkflow_vq::VqigModel;

use crate::analysis::{
    across_seed_variance, class_covariance_traces, mean_pairwise_l2, pca, trace_spread,
};
use crate::checkpoint::Checkpoint;
use crate::config::Stream;
use crate::criteria;
use crate::metrics::{CriterionResult, MetricsReport};
use crate::run::{
    restore_trainer, trainer_checkpoint, Log, Run, CODEBOOK, EXPFLOW, POSEFLOW, VQIG,
};

/// Steps between intermediate checkpoints.
pub const CHECKPOINT_EVERY: u64 = 1000;

pub fn synth_data(run: &Run, quiet: bool) -> Result<()> {
    let (dir, mut log) = run.command_dir("synth-data", quiet)?;
    let spec = run.config.scene();
    let d = &run.config.data;
    let mut report = MetricsReport::new(&run.config.experiment, "synth-data");
    for (split, n, stream) in [
        ("train", d.train_sequences, Stream::TrainData),
        ("held", d.held_sequences, Stream::HeldData),
    ] {
        let seed = run.seed(stream);
        let seqs = synth_dataset(&spec, n, seed)?;
        let out = run.dataset_dir(split);
        if out.exists() {
            std::fs::remove_dir_all(&out)?;
        }
        save_dataset(&out, &spec, seed, &seqs)?;
        log.line(&format!(
            "{split}: {n} sequences of {} frames -> {}",
            spec.seq_len,
            out.display()
        ));
        report.info(&format!("{split} sequences"), n as f64, "count");
    }
    report.info("sequence length", spec.seq_len as f64, "frames");
    report.info("classes", spec.classes as f64, "count");
    report.write(&dir)
}

fn losses_csv(history: &[talkflow_core::generators::StepRecord]) -> String {
    let Some(first) = history.first() else {
        return "step\n".into();
    };
    let mut out = String::from("step");
    for (name, _) in &first.terms {
        write!(out, ",{name}").unwrap();
    }
    out.push('\n');
    for r in history {
        write!(out, "{}", r.step).unwrap();
        for (_, v) in &r.terms {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Runs to the configured step count with periodic checkpoints; returns wall seconds.
fn train_loop<O: Objective<f64>>(
    run: &Run,
    kind: &str,
    trainer: &mut Trainer<f64, O>,
    log: &mut Log,
    dir: &Path,
) -> Result<f64> {
    let t0 = Instant::now();
    let total = trainer.config.steps;
    let every = (total / 20).max(1);
    while trainer.step < total {
        let rec = trainer.step()?;
        let step = rec.step + 1;
        if step % every == 0 || step == total {
            let terms: Vec<String> = rec
                .terms
                .iter()
                .map(|(n, v)| format!("{n} {v:.5}"))
                .collect();
            log.line(&format!("{kind} step {step}/{total}: {}", terms.join(", ")));
        }
        if step % CHECKPOINT_EVERY == 0 && step < total {
            trainer_checkpoint(kind, &run.config, trainer).save(&run.checkpoint_path(kind))?;
        }
    }
    let seconds = t0.elapsed().as_secs_f64();
    trainer_checkpoint(kind, &run.config, trainer).save(&run.checkpoint_path(kind))?;
    std::fs::write(dir.join("losses.csv"), losses_csv(&trainer.history))?;
    log.line(&format!(
        "{kind}: {} steps in {seconds:.1} s -> {}",
        trainer.step,
        run.checkpoint_path(kind).display()
    ));
    Ok(seconds)
}

fn maybe_resume<O: Objective<f64>>(
    run: &Run,
    kind: &str,
    trainer: &mut Trainer<f64, O>,
    resume: bool,
    log: &mut Log,
) -> Result<()> {
    if resume && run.has(kind) {
        let ckpt = Checkpoint::load(&run.checkpoint_path(kind))?;
        restore_trainer(trainer, &ckpt, kind)?;
        log.line(&format!("resuming {kind} from step {}", trainer.step));
    }
    Ok(())
}

pub fn train_expflow(run: &Run, quiet: bool, resume: bool) -> Result<()> {
    let (dir, mut log) = run.command_dir("train-expflow", quiet)?;
    let train = run.train_data()?;
    let held = run.held_data()?;
    let model = ExpFlowModel::new(run.config.expflow, run.seed(Stream::ExpFlowInit))?;
    let nll0 = model.dataset_nll(&held)?;
    let objective = ExpFlowObjective::new(model, train.clone())?;
    let mut trainer = Trainer::new(
        objective,
        run.config
            .train_expflow
            .train_config(run.seed(Stream::ExpFlowTrain)),
    )?;
    maybe_resume(run, EXPFLOW, &mut trainer, resume, &mut log)?;
    let seconds = train_loop(run, EXPFLOW, &mut trainer, &mut log, &dir)?;
    let model = &trainer.objective.model;
    let nll1 = model.dataset_nll(&held)?;
    let bank = run.build_bank(model, &train)?;
    bank.save(&run.bank_path())?;
    log.line(&format!(
        "held NLL {nll0:.3} -> {nll1:.3}; bank of {} latents",
        bank.len()
    ));
    let mut report = MetricsReport::new(&run.config.experiment, "train-expflow");
    report.info("steps", trainer.step as f64, "steps");
    report.info("train_seconds", seconds, "s");
    report.info("held NLL initial", nll0, "nats/frame");
    report.info("held NLL trained", nll1, "nats/frame");
    report.info("bank size", bank.len() as f64, "latents");
    report.write(&dir)
}

pub fn train_poseflow(run: &Run, quiet: bool, resume: bool) -> Result<()> {
    let (dir, mut log) = run.command_dir("train-poseflow", quiet)?;
    let train = run.train_data()?;
    let held = run.held_data()?;
    let model = PoseFlowModel::new(run.config.poseflow, run.seed(Stream::PoseInit))?;
    let nll0 = model.dataset_loss(&held)?;
    let objective = PoseFlowObjective::new(model, train)?;
    let mut trainer = Trainer::new(
        objective,
        run.config
            .train_poseflow
            .train_config(run.seed(Stream::PoseTrain)),
    )?;
    maybe_resume(run, POSEFLOW, &mut trainer, resume, &mut log)?;
    let seconds = train_loop(run, POSEFLOW, &mut trainer, &mut log, &dir)?;
    let nll1 = trainer.objective.model.dataset_loss(&held)?;
    let mut report = MetricsReport::new(&run.config.experiment, "train-poseflow");
    report.info("steps", trainer.step as f64, "steps");
    report.info("train_seconds", seconds, "s");
    report.info("held NLL initial", nll0, "nats/frame");
    report.info("held NLL trained", nll1, "nats/frame");
    report.write(&dir)
}

/// The autoencoder as it stands before its first optimizer step.
pub fn initial_autoencoder(run: &Run) -> Result<PatchAutoencoder<f64>> {
    let model = PatchAutoencoder::new(run.config.vq, run.seed(Stream::AeInit))?;
    Ok(AeObjective::new(model, run.patches(), Some(run.seed(Stream::AeInit)))?.model)
}

pub fn train_codebook(run: &Run, quiet: bool, resume: bool) -> Result<()> {
    let (dir, mut log) = run.command_dir("train-codebook", quiet)?;
    let held = stack_images(&run.held_patches());
    let model = initial_autoencoder(run)?;
    let err0 = model.recon_error(&held)?;
    let objective = AeObjective::new(model, run.patches(), None)?;
    let mut trainer = Trainer::new(
        objective,
        run.config
            .train_codebook
            .train_config(run.seed(Stream::AeTrain)),
    )?;
    maybe_resume(run, CODEBOOK, &mut trainer, resume, &mut log)?;
    let seconds = train_loop(run, CODEBOOK, &mut trainer, &mut log, &dir)?;
    let model = &trainer.objective.model;
    let err1 = model.recon_error(&held)?;
    let (_, idx) = model.quantize(&stack_images(&run.patches()))?;
    let usage = talkflow_vq::codebook::usage(&idx, model.config.codebook_size);
    let (_, first) = model.quantize(
        &held
            .slice(ndarray::s![..model.config.pixels(), ..])
            .to_owned(),
    )?;
    std::fs::write(
        dir.join("index_map.csv"),
        index_map_csv(&first, model.config.grid),
    )?;
    log.line(&format!(
        "held recon error {err0:.4} -> {err1:.4}; code usage {usage:.3}"
    ));
    let mut report = MetricsReport::new(&run.config.experiment, "train-codebook");
    report.info("steps", trainer.step as f64, "steps");
    report.info("train_seconds", seconds, "s");
    report.info("held recon error initial", err0, "mean abs");
    report.info("held recon error trained", err1, "mean abs");
    report.info("code usage", usage, "fraction");
    report.write(&dir)
}

/// A frozen copy of the trained autoencoder.
fn frozen_autoencoder(run: &Run) -> Result<PatchAutoencoder<f64>> {
    let mut ae = run.load_codebook()?;
    ae.freeze();
    Ok(ae)
}

pub fn initial_vqig(run: &Run, ae: &PatchAutoencoder<f64>) -> Result<VqigModel<f64>> {
    VqigModel::new(run.config.vqig, ae, run.seed(Stream::VqigInit))
}

pub fn train_vqig(run: &Run, quiet: bool, resume: bool) -> Result<()> {
    let (dir, mut log) = run.command_dir("train-vqig", quiet)?;
    let ae = frozen_autoencoder(run)?;
    if ae.config != run.config.vq {
        return Err(Error::config(
            "the trained codebook was built with a different vq configuration",
        ));
    }
    let held = run.pairs(true);
    let model = initial_vqig(run, &ae)?;
    let acc0 = model.code_accuracy(&held)?;
    let objective = VqigObjective::new(model, run.pairs(false))?;
    let mut trainer = Trainer::new(
        objective,
        run.config
            .train_vqig
            .train_config(run.seed(Stream::VqigTrain)),
    )?;
    maybe_resume(run, VQIG, &mut trainer, resume, &mut log)?;
    let seconds = train_loop(run, VQIG, &mut trainer, &mut log, &dir)?;
    let acc1 = trainer.objective.model.code_accuracy(&held)?;
    log.line(&format!("held code accuracy {acc0:.3} -> {acc1:.3}"));
    let mut report = MetricsReport::new(&run.config.experiment, "train-vqig");
    report.info("steps", trainer.step as f64, "steps");
    report.info("train_seconds", seconds, "s");
    report.info("held code accuracy initial", acc0, "fraction");
    report.info("held code accuracy trained", acc1, "fraction");
    report.write(&dir)
}

fn held_sequence(held: &[CoeffSequence], index: usize) -> Result<&CoeffSequence> {
    held.get(index).ok_or_else(|| {
        Error::argument(format!(
            "held-out sequence {index} does not exist ({} available)",
            held.len()
        ))
    })
}

pub fn sample(run: &Run, quiet: bool) -> Result<()> {
    let (dir, mut log) = run.command_dir("sample", quiet)?;
    let s = run.config.sample;
    let model = run.load_expflow()?;
    let bank = run.load_bank(&model)?;
    let held = run.held_data()?;
    let seq = held_sequence(&held, s.sequence)?;
    let class = s.class.unwrap_or(seq.class);
    let audio = SignalAudio(seq.audio.clone());
    let mut runs = Vec::new();
    for k in 0..s.seeds {
        let options = RolloutOptions {
            mode: SamplingMode::Random,
            project: s.project,
            seed: k,
            length: s.length,
        };
        let r = rollout_expression(
            &model,
            seq.coeffs.row(0),
            &audio,
            class,
            &options,
            Some(&bank),
        )?;
        if k == 0 && r.untrained {
            log.line("warning: the expression model has never been trained");
        }
        write_csv(&dir.join(format!("seed_{k:03}.csv")), &r.frames, "beta")?;
        runs.push(r.frames);
    }
    let spec = run.config.scene();
    let mut report = MetricsReport::new(&run.config.experiment, "sample");
    report.info("seeds", s.seeds as f64, "count");
    report.info("class", class as f64, "index");
    report.info("mean pairwise L2", mean_pairwise_l2(&runs), "coeff");
    report.info(
        "blink variance",
        across_seed_variance(&runs, &spec.blink),
        "coeff²",
    );
    report.info(
        "lip variance",
        across_seed_variance(&runs, &spec.lip),
        "coeff²",
    );
    if run.has(POSEFLOW) {
        let pose = run.load_poseflow()?;
        let tracks: Vec<Array2<f64>> = (0..s.seeds)
            .map(|k| rollout_pose(&pose, &audio, k, s.length).map(|r| r.frames))
            .collect::<Result<_>>()?;
        for (k, t) in tracks.iter().enumerate() {
            write_csv(&dir.join(format!("pose_{k:03}.csv")), t, "rho")?;
        }
        report.info("pose trace spread", trace_spread(&tracks), "coeff²");
    }
    log.line(&format!(
        "{} rollouts of class {class} under held-out sequence {}",
        s.seeds, s.sequence
    ));
    report.write(&dir)
}

pub fn transfer(run: &Run, quiet: bool, reference: usize, target: usize) -> Result<()> {
    let (dir, mut log) = run.command_dir("transfer", quiet)?;
    let model = run.load_expflow()?;
    let held = run.held_data()?;
    let r = held_sequence(&held, reference)?;
    let t = held_sequence(&held, target)?;
    let len = r.len().min(t.len());
    let audio = SignalAudio(t.audio.clone());
    let out = emotion_transfer(&model, r, t.coeffs.row(0), &audio, run.config.seed, len)?;
    write_csv(&dir.join("transfer.csv"), &out.frames, "beta")?;
    let own = emotion_transfer(
        &model,
        r,
        r.coeffs.row(0),
        &SignalAudio(r.audio.clone()),
        run.config.seed,
        r.len(),
    )?;
    let self_err = (&own.frames - &r.coeffs)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    log.line(&format!(
        "class {} expression replayed onto sequence {target}; self-transfer error {self_err:.2e}",
        r.class
    ));
    let mut report = MetricsReport::new(&run.config.experiment, "transfer");
    report.info("reference class", r.class as f64, "index");
    report.info("target class", t.class as f64, "index");
    report.info("self-transfer max error", self_err, "abs");
    report.write(&dir)
}

fn write_png(path: &Path, img: &Array2<f64>, size: usize) -> Result<()> {
    let buf = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let row = img.row(y as usize * size + x as usize);
        image::Rgb([0, 1, 2].map(|c| (row[c].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Drives the generator with either generated or ground-truth coefficients.
pub fn animate(run: &Run, quiet: bool, ground_truth: bool, frames: Option<usize>) -> Result<()> {
    let (dir, mut log) = run.command_dir("animate", quiet)?;
    let model = run.load_vqig()?;
    let held = run.held_data()?;
    let s = run.config.sample;
    let seq = held_sequence(&held, s.sequence)?;
    let len = frames.unwrap_or(s.length).min(seq.len());
    let class = s.class.unwrap_or(seq.class);
    let audio = SignalAudio(seq.audio.clone());
    let (betas, rhos, source_of_motion) = if ground_truth {
        (
            seq.coeffs.slice(ndarray::s![..len, ..]).to_owned(),
            seq.pose.slice(ndarray::s![..len, ..]).to_owned(),
            "ground truth",
        )
    } else {
        let ef = run.load_expflow()?;
        let bank = run.load_bank(&ef)?;
        let pf = run.load_poseflow()?;
        let options = RolloutOptions {
            mode: SamplingMode::Random,
            project: s.project,
            seed: run.config.seed,
            length: len,
        };
        let b = rollout_expression(&ef, seq.coeffs.row(0), &audio, class, &options, Some(&bank))?
            .frames;
        let r = rollout_pose(&pf, &audio, run.config.seed, len)?.frames;
        (b, r, "generated")
    };
    let res = model.ae_config.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed(Stream::Eval));
    let source = render(
        &FaceIdentity::sample(&mut rng),
        &Motion::neutral(),
        class,
        res,
    );
    write_png(&dir.join("source.png"), &source, res)?;
    let out = model.animate_with_codes(&source, &betas, &rhos)?;
    let mut codes = String::from("frame,cell,code\n");
    let mut files = Vec::new();
    for (t, (img, idx)) in out.iter().enumerate() {
        let name = format!("frame_{t:04}.png");
        write_png(&dir.join(&name), img, res)?;
        files.push(name);
        for (c, k) in idx.iter().enumerate() {
            writeln!(codes, "{t},{c},{k}").unwrap();
        }
    }
    std::fs::write(dir.join("codes.csv"), codes)?;
    write_csv(&dir.join("beta.csv"), &betas, "beta")?;
    write_csv(&dir.join("rho.csv"), &rhos, "rho")?;
    let manifest = serde_json::json!({
        "frames": files,
        "resolution": res,
        "class": class,
        "sequence": s.sequence,
        "motion": source_of_motion,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    log.line(&format!(
        "{} frames at {res}×{res} from {source_of_motion} coefficients",
        out.len()
    ));
    let mut report = MetricsReport::new(&run.config.experiment, "animate");
    report.info("frames", out.len() as f64, "count");
    report.write(&dir)
}

pub fn export_latents(run: &Run, quiet: bool) -> Result<()> {
    let (dir, mut log) = run.command_dir("export-latents", quiet)?;
    let model = run.load_expflow()?;
    let held = run.held_data()?;
    let items = all_frames(&held);
    let z = model.encode_frames(&held, &items)?;
    let labels: Vec<usize> = items.iter().map(|&(s, _)| held[s].class).collect();
    let mut out = String::new();
    for j in 0..z.ncols() {
        write!(out, "z{j},").unwrap();
    }
    out.push_str("class\n");
    for (row, c) in z.rows().into_iter().zip(&labels) {
        for v in row {
            write!(out, "{v},").unwrap();
        }
        writeln!(out, "{c}").unwrap();
    }
    std::fs::write(dir.join("latents.csv"), out)?;
    let p = pca(z.view(), 2, run.seed(Stream::Eval))?;
    let proj = p.project(z.view());
    let mut out = String::from("pc1,pc2,class\n");
    for (row, c) in proj.rows().into_iter().zip(&labels) {
        writeln!(out, "{},{},{c}", row[0], row[1]).unwrap();
    }
    std::fs::write(dir.join("pca.csv"), out)?;
    let mut report = MetricsReport::new(&run.config.experiment, "export-latents");
    report.info("latents", z.nrows() as f64, "rows");
    report.info("pca eigenvalue 1", p.eigenvalues[0], "latent²");
    report.info("pca eigenvalue 2", p.eigenvalues[1], "latent²");
    for (c, t) in class_covariance_traces(z.view(), &labels, model.config.classes)
        .into_iter()
        .enumerate()
    {
        report.info(&format!("class {c} covariance trace"), t, "latent²");
    }
    log.line(&format!(
        "{} latents of dimension {} exported",
        z.nrows(),
        z.ncols()
    ));
    report.write(&dir)
}

pub fn latent_dump(run_dir: &Path) -> PathBuf {
    run_dir.join("export-latents").join("latents.csv")
}

fn stored_metric(run: &Run, command: &str, name: &str) -> Option<f64> {
    let text = std::fs::read_to_string(run.dir.join(command).join("metrics.json")).ok()?;
    serde_json::from_str::<MetricsReport>(&text).ok()?.get(name)
}

fn failed(id: u8, e: Error) -> CriterionResult {
    criteria::run_criterion(id, || Err(e))
}

/// Criteria that need the trained expression flow.
fn expflow_criteria(
    run: &Run,
    wanted: &[u8],
    ablation: Option<&Path>,
    out: &mut Vec<CriterionResult>,
) {
    let needs = [5u8, 6, 7, 8, 9];
    if !needs.iter().any(|c| wanted.contains(c)) {
        return;
    }
    let loaded = (|| -> Result<_> {
        let model = run.load_expflow()?;
        let bank = run.load_bank(&model)?;
        Ok((model, bank, run.train_data()?, run.held_data()?))
    })();
    let (model, bank, train, held) = match loaded {
        Ok(v) => v,
        Err(e) => {
            out.extend(
                needs
                    .iter()
                    .filter(|c| wanted.contains(c))
                    .map(|&c| failed(c, e.clone())),
            );
            return;
        }
    };
    let spec = run.config.scene();
    let untrained = match ExpFlowModel::new(model.config, run.seed(Stream::ExpFlowInit)) {
        Ok(m) => m,
        Err(e) => {
            out.push(failed(5, e));
            return;
        }
    };
    let a = criteria::ExpFlowArtifacts {
        model: &model,
        untrained: &untrained,
        bank: &bank,
        train: &train,
        held: &held,
        spec: &spec,
        train_seconds: stored_metric(run, "train-expflow", "train_seconds"),
    };
    if wanted.contains(&5) {
        out.push(criteria::expflow_run(&a, run.seed(Stream::Eval)));
    }
    if wanted.contains(&6) {
        out.push(criteria::diversity(&a, run.config.sample.sequence));
    }
    if wanted.contains(&7) {
        out.push(match ablation {
            None => failed(7, Error::data("no ablation run given (--ablation-run DIR)")),
            Some(dir) => match Run::new(run.config.clone(), dir).load_expflow() {
                Err(e) => failed(7, e),
                Ok(other) => {
                    let (with, without) = if model.config.dropout >= other.config.dropout {
                        (&model, &other)
                    } else {
                        (&other, &model)
                    };
                    criteria::dropout_ablation(
                        with,
                        without,
                        &held,
                        &[latent_dump(&run.dir), latent_dump(dir)],
                    )
                }
            },
        });
    }
    if wanted.contains(&8) {
        out.push(criteria::transfer_identity(&model, &held));
    }
    if wanted.contains(&9) {
        out.push(criteria::projection(&bank, run.seed(Stream::Eval)));
    }
}

fn vq_criterion(run: &Run) -> CriterionResult {
    let loaded = (|| -> Result<_> {
        let trained = run.load_codebook()?;
        let (ckpt, _) = run.checkpoint(CODEBOOK)?;
        Ok((trained, initial_autoencoder(run)?, ckpt.step))
    })();
    match loaded {
        Err(e) => failed(10, e),
        Ok((trained, initial, steps)) => criteria::vq_suite(
            &criteria::VqArtifacts {
                trained: &trained,
                initial: &initial,
                train_images: &run.patches(),
                held_images: &run.held_patches(),
                steps,
            },
            run.seed(Stream::Eval),
        ),
    }
}

fn vqig_criterion(run: &Run) -> CriterionResult {
    let loaded = (|| -> Result<_> {
        let trained = run.load_vqig()?;
        let ae = frozen_autoencoder(run)?;
        let initial = initial_vqig(run, &ae)?;
        Ok((trained, ae, initial))
    })();
    match loaded {
        Err(e) => failed(11, e),
        Ok((trained, ae, initial)) => criteria::vqig_desk(
            &criteria::VqigArtifacts {
                trained: &trained,
                initial: &initial,
                autoencoder: &ae,
                held_pairs: &run.pairs(true),
                classes: run.config.data.classes,
                train_seconds: stored_metric(run, "train-vqig", "train_seconds"),
            },
            run.seed(Stream::Eval),
        ),
    }
}

fn pose_criterion(run: &Run) -> CriterionResult {
    match run.load_poseflow().and_then(|m| Ok((m, run.held_data()?))) {
        Err(e) => failed(12, e),
        Ok((model, held)) => criteria::poseflow(&model, &held, run.config.scene().energy_radius),
    }
}

/// Evaluates the chosen criteria in order; every result is also appended to the report.
pub fn evaluate(
    run: &Run,
    wanted: &[u8],
    ablation: Option<&Path>,
    mut each: impl FnMut(&CriterionResult),
) -> Vec<CriterionResult> {
    let seed = run.seed(Stream::Eval);
    let mut results = Vec::new();
    let mut emit = |r: CriterionResult, results: &mut Vec<CriterionResult>| {
        each(&r);
        results.push(r);
    };
    for (id, f) in [
        (1u8, criteria::bijectivity as fn(u64) -> CriterionResult),
        (2, criteria::logdet_oracle),
        (3, |_| criteria::density_normalization()),
        (4, criteria::gradient_suite),
    ] {
        if wanted.contains(&id) {
            emit(f(seed), &mut results);
        }
    }
    let mut flow = Vec::new();
    expflow_criteria(run, wanted, ablation, &mut flow);
    for r in flow {
        emit(r, &mut results);
    }
    if wanted.contains(&10) {
        emit(vq_criterion(run), &mut results);
    }
    if wanted.contains(&11) {
        emit(vqig_criterion(run), &mut results);
    }
    if wanted.contains(&12) {
        emit(pose_criterion(run), &mut results);
    }
    results
}

pub fn eval(
    run: &Run,
    quiet: bool,
    wanted: &[u8],
    ablation: Option<&Path>,
) -> Result<Vec<CriterionResult>> {
    let (dir, mut log) = run.command_dir("eval", quiet)?;
    let results = evaluate(run, wanted, ablation, |r| {
        println!("{}", r.line());
        log.line(&format!(
            "criterion {} finished in {:.1} s",
            r.id, r.seconds
        ));
    });
    let mut report = MetricsReport::new(&run.config.experiment, "eval");
    for r in &results {
        if let Some(e) = &r.error {
            report.notes.push(format!("criterion {}: {e}", r.id));
        }
        report.add_criterion(r.clone());
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    report.info("criteria passed", passed as f64, "count");
    report.info("criteria evaluated", results.len() as f64, "count");
    report.write(&dir)?;
    log.line(&format!("{passed}/{} criteria passed", results.len()));
    Ok(results)
}
