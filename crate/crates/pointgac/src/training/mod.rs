//! Teacher-student pretraining loop: masking, codebook updates, assignment
//! alignment, AdamW, schedules, EMA teacher, and the maintenance cadence.

pub mod model;
pub mod optim;
pub mod probe;
pub mod schedule;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::codebook::{
    self, maintenance_epsilon, maintenance_step, maintenance_step_random, Codebook,
    MaintenanceMode,
};
use crate::config::{derive_rng, CodebookFormat, RunConfig};
use crate::data::DatasetManifest;
use crate::diffcore::checkpoint::{atomic_write, read_checkpoint, write_checkpoint};
use crate::diffcore::gradcheck::{grad_check, GradCheckReport};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::transport::{partition_pipeline, PatchSet};

pub use model::{
    alignment_loss, alignment_loss_graph, random_mask, student_forward, teacher_forward,
    MaskSpec, StudentParams, TeacherParams,
};
pub use optim::AdamW;
pub use probe::{encode_cloud, linear_probe, nearest_centroid_accuracy, ProbeResult};
pub use schedule::{ema_momentum, lr_schedule};

/// A cloud ready for training: labels resolved, patches fixed. Partitioning
/// is deterministic per cloud, so it is done once and reused every epoch.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub patches: PatchSet,
    pub class: u32,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<PreparedCloud>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Load every cloud (with cached segmentation labels for the
/// geometry-aware path) and partition it.
pub fn prepare_dataset(manifest: &DatasetManifest, config: &RunConfig) -> Result<Dataset> {
    let partition = config.partition_config();
    let items: Vec<PreparedCloud> = manifest
        .entries
        .par_iter()
        .map(|entry| -> Result<PreparedCloud> {
            let cloud = match config.grouping {
                crate::transport::Grouping::Gap => {
                    crate::data::load_cloud_with_segmentation(entry, config)?
                }
                crate::transport::Grouping::Knn => crate::data::load_cloud(&entry.path)?,
            };
            let patches = partition_pipeline(&cloud, config.groups, &partition)?;
            Ok(PreparedCloud {
                cloud,
                patches,
                class: entry.class,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        items,
        train: manifest.train.clone(),
        val: manifest.val.clone(),
    })
}

pub struct TrainState {
    pub config: RunConfig,
    pub student: StudentParams,
    pub teacher: TeacherParams,
    pub codebook: Option<Codebook>,
    pub optim: AdamW,
    pub step: usize,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, "init.student", 0, 0);
        let student = StudentParams::init(&config, &mut rng);
        let teacher = TeacherParams::from_student(&student);
        let shapes: Vec<Vec<usize>> = student
            .flat()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let optim = AdamW::new(&shapes, config.beta1, config.beta2, config.weight_decay);
        Ok(TrainState {
            config,
            student,
            teacher,
            codebook: None,
            optim,
            step: 0,
            epoch: 0,
        })
    }

    /// Serialize everything that defines the run into the checkpoint
    /// container: both parameter sets, codebook statistics, optimizer
    /// moments, and counters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blocks: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.student.flat() {
            blocks.push((name, t.clone()));
        }
        for (name, t) in self.teacher.flat() {
            blocks.push((name, t.clone()));
        }
        if let Some(cb) = &self.codebook {
            blocks.push(("codebook.vectors".into(), cb.vectors.clone()));
            blocks.push(("codebook.n_acc".into(), Tensor::vector(cb.n_acc.clone())));
            blocks.push(("codebook.m_acc".into(), cb.m_acc.clone()));
            blocks.push((
                "codebook.update_count".into(),
                Tensor::vector(cb.update_count.iter().map(|&c| c as f64).collect()),
            ));
            blocks.push((
                "codebook.epoch_updates".into(),
                Tensor::vector(cb.epoch_updates.iter().map(|&c| c as f64).collect()),
            ));
        }
        for (i, (name, _)) in self.student.flat().iter().enumerate() {
            blocks.push((format!("optim.m.{name}"), self.optim.m[i].clone()));
            blocks.push((format!("optim.v.{name}"), self.optim.v[i].clone()));
        }
        blocks.push((
            "state.meta".into(),
            Tensor::vector(vec![
                self.step as f64,
                self.epoch as f64,
                self.optim.t as f64,
                if self.codebook.is_some() { 1.0 } else { 0.0 },
            ]),
        ));
        blocks.push((
            "state.seed".into(),
            Tensor::vector(vec![
                (self.config.seed >> 32) as f64,
                (self.config.seed & 0xffff_ffff) as f64,
            ]),
        ));
        write_checkpoint(path, self.config.digest(), &blocks)
    }

    /// Rebuild a state from a checkpoint. The config must be the one that
    /// produced the checkpoint (digest check).
    pub fn load(path: &Path, config: &RunConfig) -> Result<Self> {
        let (digest, blocks) = read_checkpoint(path)?;
        if digest != config.digest() {
            return Err(Error::invalid(format!(
                "checkpoint digest {digest:016x} does not match configuration digest {:016x}",
                config.digest()
            )));
        }
        let map: BTreeMap<String, Tensor> = blocks.into_iter().collect();
        let fetch = |name: &str| -> Result<&Tensor> {
            map.get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint missing block `{name}`")))
        };

        let mut state = TrainState::new(config.clone())?;
        let mut missing: Vec<String> = Vec::new();
        state.student.visit_mut(&mut |name, t| match map.get(&name) {
            Some(v) if v.shape() == t.shape() => *t = v.clone(),
            _ => missing.push(name),
        });
        state.teacher.visit_mut(&mut |name, t| match map.get(&name) {
            Some(v) if v.shape() == t.shape() => *t = v.clone(),
            _ => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "checkpoint missing or misshaped blocks: {}",
                missing.join(", ")
            )));
        }

        let meta = fetch("state.meta")?.data().to_vec();
        state.step = meta[0] as usize;
        state.epoch = meta[1] as usize;
        state.optim.t = meta[2] as u64;
        if meta[3] > 0.0 {
            let vectors = fetch("codebook.vectors")?.clone();
            let n_acc = fetch("codebook.n_acc")?.data().to_vec();
            let m_acc = fetch("codebook.m_acc")?.clone();
            let update_count = fetch("codebook.update_count")?
                .data()
                .iter()
                .map(|&c| c as u64)
                .collect();
            let epoch_updates = fetch("codebook.epoch_updates")?
                .data()
                .iter()
                .map(|&c| c as u64)
                .collect();
            state.codebook = Some(Codebook {
                vectors,
                n_acc,
                m_acc,
                update_count,
                epoch_updates,
                gamma: config.gamma,
            });
        }
        for (i, (name, _)) in state.student.flat().iter().enumerate() {
            state.optim.m[i] = fetch(&format!("optim.m.{name}"))?.clone();
            state.optim.v[i] = fetch(&format!("optim.v.{name}"))?.clone();
        }
        Ok(state)
    }
}

/// theta_teacher <- momentum * theta_teacher + (1 - momentum) * theta_student
/// for the embedding and encoder blocks (the decoder and mask embedding are
/// student-only).
pub fn ema_teacher_update(teacher: &mut TeacherParams, student: &StudentParams, momentum: f64) {
    let student_flat = student.flat();
    let mut cursor = 0usize;
    teacher.visit_mut(&mut |name, t| {
        let (sname, s) = &student_flat[cursor];
        assert_eq!(
            name.strip_prefix("teacher."),
            sname.strip_prefix("student."),
            "teacher/student parameter layouts diverged"
        );
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
        cursor += 1;
    });
}

/// Everything observable about one training step.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub loss: f64,
    pub lr: f64,
    pub tau_t: f64,
    /// Fraction of codes with zero updates in the epoch window so far.
    pub dead_fraction: f64,
    /// Frobenius norm of the codebook movement in this step.
    pub codebook_drift: f64,
    /// Pooled teacher features of the batch; the maintenance cadence feeds
    /// on the most recent batch.
    pub teacher_features: Tensor,
}

/// One optimization step over a batch of prepared clouds.
pub fn pretrain_step(state: &mut TrainState, batch: &[&PreparedCloud]) -> Result<StepDiagnostics> {
    assert!(!batch.is_empty(), "invalid argument: empty batch");
    let config = state.config.clone();
    let heads = config.heads;
    let l = config.groups;
    let d = config.dim;
    let total_steps = config.total_steps().max(1);
    let step = state.step;
    let tau_t = codebook::teacher_temperature(
        step,
        total_steps,
        config.tau_teacher_start,
        config.tau_teacher_end,
    );

    // Teacher encodes every complete patch set.
    let teacher = &state.teacher;
    let teacher_feats: Vec<Tensor> = batch
        .par_iter()
        .map(|item| teacher_forward(&item.patches, &item.cloud, teacher, heads))
        .collect();

    let mut pool_data = Vec::with_capacity(batch.len() * l * d);
    for t in &teacher_feats {
        pool_data.extend_from_slice(t.data());
    }
    let pool = Tensor::matrix(batch.len() * l, d, pool_data);

    if state.codebook.is_none() {
        let mut rng = derive_rng(config.seed, "init.codebook", 0, 0);
        state.codebook = Some(Codebook::init(
            &pool,
            config.codebook_size,
            config.gamma,
            &mut rng,
        )?);
    }
    let cb = state.codebook.as_mut().unwrap();
    let c_before = cb.vectors.clone();
    let assignments = codebook::nearest_code(&pool, cb);
    codebook::kmeans_update(cb, &pool, &assignments);
    let drift = {
        let mut s = 0.0;
        for (a, b) in cb.vectors.data().iter().zip(c_before.data()) {
            let t = a - b;
            s += t * t;
        }
        s.sqrt()
    };
    // Immutable snapshot for all assignments this step.
    let snapshot = cb.clone();
    let dead_fraction = snapshot.dead_fraction_window(0);

    // Masks are drawn on one thread in batch order.
    let masks: Vec<MaskSpec> = (0..batch.len())
        .map(|b| {
            let mut rng = derive_rng(config.seed, "mask", step as u64, b as u64);
            random_mask(l, config.mask_ratio, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    // Teacher assignments at masked rows.
    let q_teachers: Vec<Tensor> = (0..batch.len())
        .map(|b| {
            let mask = &masks[b];
            let mut rows = Tensor::zeros(vec![mask.masked.len(), d]);
            for (dst, &src) in mask.masked.iter().enumerate() {
                rows.row_mut(dst).copy_from_slice(teacher_feats[b].row(src));
            }
            codebook::soft_assign(&rows, &snapshot, tau_t, config.similarity).q
        })
        .collect();

    // Student forward/backward per cloud; gradients summed in batch order.
    struct CloudResult {
        loss: f64,
        grads: Vec<Tensor>,
    }
    let student = &state.student;
    let results: Vec<CloudResult> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let mut g = Graph::new();
            let (vars, registry) = student.bind(&mut g, true);
            let s_r = student_forward(&mut g, &batch[b].patches, &batch[b].cloud, &masks[b], &vars, heads);
            let loss_var = alignment_loss_graph(
                &mut g,
                s_r,
                &masks[b],
                &q_teachers[b],
                &snapshot,
                config.tau_student,
                config.similarity,
            );
            let loss = g.value(loss_var).item();
            g.backward(loss_var);
            let grads = registry.iter().map(|&(_, v)| g.grad(v)).collect();
            CloudResult { loss, grads }
        })
        .collect();

    let inv_b = 1.0 / batch.len() as f64;
    let loss: f64 = results.iter().map(|r| r.loss).sum::<f64>() * inv_b;
    if !loss.is_finite() {
        return Err(Error::Fault(format!("non-finite loss at step {step}")));
    }
    let n_blocks = results[0].grads.len();
    let mut grads: Vec<Tensor> = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let mut acc = results[0].grads[i].clone();
        for r in &results[1..] {
            for (a, g) in acc.data_mut().iter_mut().zip(r.grads[i].data()) {
                *a += g;
            }
        }
        acc.data_mut().iter_mut().for_each(|v| *v *= inv_b);
        grads.push(acc);
    }

    let lr = lr_schedule(
        step,
        total_steps,
        config.warmup_steps(),
        config.lr_max,
        config.lr_min,
    );
    let optim = &mut state.optim;
    optim.begin_step();
    let mut cursor = 0usize;
    state.student.visit_mut(&mut |_name, tensor| {
        optim.update(cursor, tensor, &grads[cursor], lr);
        cursor += 1;
    });

    let momentum = ema_momentum(step, total_steps, config.ema_start, config.ema_end);
    ema_teacher_update(&mut state.teacher, &state.student, momentum);

    state.step += 1;
    Ok(StepDiagnostics {
        loss,
        lr,
        tau_t,
        dead_fraction,
        codebook_drift: drift,
        teacher_features: pool,
    })
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau_t: f64,
    pub dead_fraction: f64,
    pub codebook_drift: f64,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,epoch,loss,lr,tau_t,dead_fraction,codebook_drift\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.9e},{:.9e},{:.6},{:.6},{:.9e}",
            r.step, r.epoch, r.loss, r.lr, r.tau_t, r.dead_fraction, r.codebook_drift
        )
        .unwrap();
    }
    out
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    /// Dead fraction over the final epoch window (zero updates).
    pub final_epoch_dead_fraction: f64,
}

fn heatmap_dims(k: usize) -> (usize, usize) {
    let mut h = (k as f64).sqrt().floor() as usize;
    while h > 1 && k % h != 0 {
        h -= 1;
    }
    let h = h.max(1);
    (h, k / h)
}

/// Full pretraining: epochs of `pretrain_step`, maintenance at each epoch
/// end, per-epoch checkpoints and utilization heatmaps, and a metrics CSV.
pub fn pretrain_loop(dataset: &Dataset, config: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if config.codebook_format != CodebookFormat::OnlineKmeans {
        return Err(Error::NotImplemented(
            "queue and sinkhorn codebook formats are recognized but not implemented",
        ));
    }
    if dataset.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::create_dir_all(out.join("heatmaps"))?;
    atomic_write(&out.join("config.txt"), config.serialize().as_bytes())?;

    let mut state = TrainState::new(config.clone())?;
    let steps_per_epoch = config.steps_per_epoch();
    let batch_size = config.batch_size;
    let mut metrics = Vec::with_capacity(config.epochs * steps_per_epoch);
    let mut last_features: Option<Tensor> = None;
    let mut final_dead = 1.0;

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        if let Some(cb) = state.codebook.as_mut() {
            cb.begin_epoch_window();
        }
        let mut order = dataset.train.clone();
        let mut rng = derive_rng(config.seed, "batch.order", epoch as u64, 0);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }

        for s in 0..steps_per_epoch {
            let batch: Vec<&PreparedCloud> = order[s * batch_size..(s + 1) * batch_size]
                .iter()
                .map(|&i| &dataset.items[i])
                .collect();
            let diag = pretrain_step(&mut state, &batch).map_err(|e| {
                // Fault path: dump the state next to the outputs.
                if let Error::Fault(_) = e {
                    let _ = state.save(&out.join("fault_state.bin"));
                }
                e
            })?;
            metrics.push(MetricsRow {
                step: state.step - 1,
                epoch,
                loss: diag.loss,
                lr: diag.lr,
                tau_t: diag.tau_t,
                dead_fraction: diag.dead_fraction,
                codebook_drift: diag.codebook_drift,
            });
            last_features = Some(diag.teacher_features);
        }

        // Epoch boundary: record the window, then maintain.
        let cb = state.codebook.as_mut().expect("codebook after first step");
        final_dead = cb.dead_fraction_window(0);
        match config.maintenance {
            MaintenanceMode::Meaningful => {
                let feats = last_features.as_ref().expect("at least one step ran");
                let eps = maintenance_epsilon(&cb.update_count);
                maintenance_step(cb, feats, eps)?;
            }
            MaintenanceMode::Random => {
                let feats = last_features.as_ref().expect("at least one step ran");
                let mut rng = derive_rng(config.seed, "maintenance.random", epoch as u64, 0);
                maintenance_step_random(cb, feats, &mut rng)?;
            }
            MaintenanceMode::Off => {}
        }

        state.save(&out.join(format!("checkpoints/epoch_{epoch:03}.bin")))?;
        let (h, w) = heatmap_dims(config.codebook_size);
        codebook::utilization_export(
            state.codebook.as_ref().unwrap(),
            h,
            w,
            &out.join(format!("heatmaps/epoch_{epoch:03}.pgm")),
        )?;
    }

    state.save(&out.join("checkpoint.bin"))?;
    atomic_write(&out.join("metrics.csv"), metrics_to_csv(&metrics).as_bytes())?;
    Ok(TrainOutcome {
        state,
        metrics,
        final_epoch_dead_fraction: final_dead,
    })
}

/// Run a closure inside a rayon pool with the requested thread count
/// (0 = library default). Results are thread-count invariant by design;
/// one thread additionally pins the execution order for the determinism
/// contract.
pub fn run_with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("rayon pool");
    pool.install(f)
}

/// Micro configuration for gradient checking: small enough that central
/// differences over every parameter stay cheap.
pub fn micro_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        dim: 8,
        heads: 2,
        encoder_blocks: 1,
        decoder_blocks: 1,
        embed_hidden: 8,
        codebook_size: 16,
        groups: 4,
        points: 64,
        knn_k: 6,
        clouds_per_class: 8,
        batch_size: 2,
        epochs: 2,
        warmup_epochs: 1,
        ..RunConfig::default()
    }
}

/// Full student-pipeline gradient check on the micro configuration: the
/// loss as a function of every student parameter block is compared against
/// central finite differences.
pub fn model_grad_check(seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let config = micro_config(seed);
    let mut rng = derive_rng(seed, "gradcheck.data", 0, 0);
    let spec = crate::data::SyntheticShapeSpec {
        class: crate::data::ShapeClass::Box,
        n_points: config.points,
        jitter: 0.02,
        scale_range: (0.9, 1.1),
        seed: rand::Rng::gen(&mut rng),
    };
    let cloud = crate::data::generate_shape(&spec)?;
    let patches = partition_pipeline(&cloud, config.groups, &config.partition_config())?;

    let mut init_rng = derive_rng(seed, "init.student", 0, 0);
    let template = StudentParams::init(&config, &mut init_rng);
    let teacher = TeacherParams::from_student(&template);
    let teacher_feats = teacher_forward(&patches, &cloud, &teacher, config.heads);

    let mut cb_rng = derive_rng(seed, "init.codebook", 0, 0);
    let mut cb = Codebook::init(&teacher_feats, config.codebook_size, config.gamma, &mut cb_rng)?;
    let assignments = codebook::nearest_code(&teacher_feats, &cb);
    codebook::kmeans_update(&mut cb, &teacher_feats, &assignments);

    let mut mask_rng = derive_rng(seed, "mask", 0, 0);
    let mask = random_mask(config.groups, config.mask_ratio, &mut mask_rng)?;
    let mut q_rows = Tensor::zeros(vec![mask.masked.len(), config.dim]);
    for (dst, &src) in mask.masked.iter().enumerate() {
        q_rows.row_mut(dst).copy_from_slice(teacher_feats.row(src));
    }
    let q_t = codebook::soft_assign(&q_rows, &cb, config.tau_teacher_start, config.similarity).q;

    let build_student = |flat: &[(String, Tensor)]| -> StudentParams {
        let mut s = template.clone();
        let mut cursor = 0usize;
        s.visit_mut(&mut |name, t| {
            assert_eq!(name, flat[cursor].0);
            *t = flat[cursor].1.clone();
            cursor += 1;
        });
        s
    };
    let forward = |student: &StudentParams, trainable: bool| -> (Graph, crate::diffcore::Var, Vec<crate::diffcore::Var>) {
        let mut g = Graph::new();
        let (vars, registry) = student.bind(&mut g, trainable);
        let s_r = student_forward(&mut g, &patches, &cloud, &mask, &vars, config.heads);
        let loss = alignment_loss_graph(
            &mut g,
            s_r,
            &mask,
            &q_t,
            &cb,
            config.tau_student,
            config.similarity,
        );
        let leaf_vars = registry.into_iter().map(|(_, v)| v).collect();
        (g, loss, leaf_vars)
    };

    let mut flat: Vec<(String, Tensor)> = template
        .flat()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();

    let report = grad_check(
        &mut flat,
        |params| {
            let student = build_student(params);
            let (g, loss, _) = forward(&student, false);
            g.value(loss).item()
        },
        |params| {
            let student = build_student(params);
            let (mut g, loss, leaves) = forward(&student, true);
            g.backward(loss);
            leaves.into_iter().map(|v| g.grad(v)).collect()
        },
        step,
        tolerance,
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::data::build_dataset;

    use super::*;

    fn smoke_config(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            clouds_per_class: 6,
            points: 96,
            knn_k: 8,
            groups: 8,
            dim: 16,
            heads: 2,
            encoder_blocks: 2,
            decoder_blocks: 1,
            embed_hidden: 16,
            codebook_size: 32,
            batch_size: 4,
            epochs: 2,
            warmup_epochs: 1,
            ..RunConfig::default()
        }
    }

    fn smoke_dataset(config: &RunConfig, dir: &Path) -> Dataset {
        let manifest = build_dataset(config, dir).unwrap();
        prepare_dataset(&manifest, config).unwrap()
    }

    #[test]
    fn ema_momentum_extremes() {
        let config = smoke_config(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let student = StudentParams::init(&config, &mut rng);
        let mut teacher = TeacherParams::from_student(&student);
        let frozen = teacher.flat().iter().map(|(_, t)| (*t).clone()).collect::<Vec<_>>();

        // momentum = 1: frozen teacher.
        let mut student2 = student.clone();
        student2.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += 1.0));
        ema_teacher_update(&mut teacher, &student2, 1.0);
        for ((_, t), f) in teacher.flat().iter().zip(&frozen) {
            assert_eq!(t.data(), f.data());
        }

        // momentum = 0: teacher copies the student.
        ema_teacher_update(&mut teacher, &student2, 0.0);
        let student_flat = student2.flat();
        for (i, (_, t)) in teacher.flat().iter().enumerate() {
            assert_eq!(t.data(), student_flat[i].1.data());
        }
    }

    #[test]
    fn ema_converges_geometrically() {
        let config = smoke_config(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let student = StudentParams::init(&config, &mut rng);
        let mut teacher = TeacherParams::from_student(&student);
        // Separate the teacher, then EMA toward the frozen student.
        teacher.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += 2.0));
        let momentum = 0.9f64;
        let gap0 = 2.0;
        for t in 1..=20 {
            ema_teacher_update(&mut teacher, &student, momentum);
            let expect = gap0 * momentum.powi(t);
            let student_flat = student.flat();
            for (i, (_, tt)) in teacher.flat().iter().enumerate() {
                for (a, b) in tt.data().iter().zip(student_flat[i].1.data()) {
                    assert!(((a - b) - expect).abs() < 1e-9, "step {t}: gap {} vs {expect}", a - b);
                }
            }
        }
    }

    #[test]
    fn two_steps_same_seed_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config(5);
        let dataset = smoke_dataset(&config, dir.path());
        let run = || {
            let mut state = TrainState::new(config.clone()).unwrap();
            let batch: Vec<&PreparedCloud> =
                dataset.train[..4].iter().map(|&i| &dataset.items[i]).collect();
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.push(pretrain_step(&mut state, &batch).unwrap().loss);
            }
            (losses, state)
        };
        let (la, sa) = run();
        let (lb, sb) = run();
        assert_eq!(la, lb);
        for ((_, a), (_, b)) in sa.student.flat().iter().zip(sb.student.flat()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn teacher_touched_only_by_ema() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config(6);
        let dataset = smoke_dataset(&config, dir.path());
        let mut state = TrainState::new(config.clone()).unwrap();
        let teacher_before: Vec<Tensor> =
            state.teacher.flat().iter().map(|(_, t)| (*t).clone()).collect();
        let batch: Vec<&PreparedCloud> =
            dataset.train[..4].iter().map(|&i| &dataset.items[i]).collect();
        pretrain_step(&mut state, &batch).unwrap();
        // Teacher after = m * before + (1 - m) * student_after, elementwise.
        let m = ema_momentum(0, config.total_steps(), config.ema_start, config.ema_end);
        let student_flat = state.student.flat();
        for (i, (_, t)) in state.teacher.flat().iter().enumerate() {
            for (j, v) in t.data().iter().enumerate() {
                let expect = m * teacher_before[i].data()[j] + (1.0 - m) * student_flat[i].1.data()[j];
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn initial_loss_bounded_by_log_k() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config(7);
        let dataset = smoke_dataset(&config, dir.path());
        let mut state = TrainState::new(config.clone()).unwrap();
        let batch: Vec<&PreparedCloud> =
            dataset.train[..4].iter().map(|&i| &dataset.items[i]).collect();
        let diag = pretrain_step(&mut state, &batch).unwrap();
        assert!(diag.loss >= 0.0);
        assert!(diag.loss <= (config.codebook_size as f64).ln());
    }

    #[test]
    fn smoke_loop_writes_artifacts_and_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config(8);
        let data_dir = dir.path().join("data");
        let out = dir.path().join("out");
        let manifest = build_dataset(&config, &data_dir).unwrap();
        let dataset = prepare_dataset(&manifest, &config).unwrap();
        let outcome = pretrain_loop(&dataset, &config, &out).unwrap();
        assert!(out.join("checkpoint.bin").exists());
        assert!(out.join("metrics.csv").exists());
        assert!(out.join("checkpoints/epoch_000.bin").exists());
        assert!(out.join("heatmaps/epoch_000.pgm").exists());
        assert_eq!(outcome.metrics.len(), config.total_steps());

        let loaded = TrainState::load(&out.join("checkpoint.bin"), &config).unwrap();
        assert_eq!(loaded.step, outcome.state.step);
        for ((_, a), (_, b)) in loaded.student.flat().iter().zip(outcome.state.student.flat()) {
            assert_eq!(a.data(), b.data());
        }
        let cb_a = loaded.codebook.as_ref().unwrap();
        let cb_b = outcome.state.codebook.as_ref().unwrap();
        assert_eq!(cb_a.vectors.data(), cb_b.vectors.data());
        assert_eq!(cb_a.update_count, cb_b.update_count);

        // Digest mismatch is rejected.
        let mut other = config.clone();
        other.mu = 0.77;
        assert!(TrainState::load(&out.join("checkpoint.bin"), &other).is_err());
    }

    #[test]
    fn micro_grad_check_passes_and_detects_corruption() {
        let report = model_grad_check(11, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "\n{}", report.render());

        // Negative control: corrupting one analytic gradient must fail.
        let config = micro_config(11);
        let mut rng = derive_rng(11, "init.student", 0, 0);
        let template = StudentParams::init(&config, &mut rng);
        let mut flat: Vec<(String, Tensor)> = template
            .flat()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let report = grad_check(
            &mut flat,
            |params| params.iter().map(|(_, t)| t.data().iter().sum::<f64>()).sum(),
            |params| {
                params
                    .iter()
                    .map(|(_, t)| {
                        let mut g = Tensor::new(t.shape().to_vec(), vec![1.0; t.numel()]);
                        g.data_mut()[0] = 1.5; // corrupted reverse rule
                        g
                    })
                    .collect()
            },
            1e-5,
            1e-4,
        );
        assert!(!report.pass);
    }
}
