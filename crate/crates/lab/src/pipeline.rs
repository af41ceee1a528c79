//! The staged experiment pipeline.
//!
//! Stages run in order and hand over through files in the output
//! directory, so each can also be run on its own:
//!
//! | stage                | reads                          | writes                                           |
//! |----------------------|--------------------------------|--------------------------------------------------|
//! | `gen-data`           |                                | `config.txt`, `corpus.bin`, `corpus.csv`         |
//! | `pretrain-reward`    | corpus                         | `reward_pretrained.ckpt`, `reward_loss.csv`      |
//! | `spl-refine`         | corpus, pre-trained reward     | `reward_refined.ckpt`, `spl_mining.csv`          |
//! | `pretrain-diffusion` | corpus, refined reward         | `diffusion.ckpt`, `diffusion_loss.csv`, `reward.ckpt`, `authenticity_loss.csv` |
//! | `finetune`           | corpus, diffusion, reward      | `finetuned_<engine>.ckpt`, `trace_<engine>.csv`, `evals_<engine>.csv` |
//! | `evaluate`           | all of the above               | `metrics.csv`, `report.txt`                      |
//! | `diagnostics`        | corpus, diffusion, reward      | `diagnostics/*.csv`                              |
//!
//! The authenticity adapter needs generated motions, so it is trained at
//! the end of `pretrain-diffusion` against the pre-trained generator.
//! A failing stage reports its name; files written by earlier stages stay.

use std::io::Write;
use std::path::{Path, PathBuf};

use rft_core::diffusion::{DiffusionModel, MlpDenoiser};
use rft_core::finetune::{run_engine, EngineKind, EngineRun, RewardContext};
use rft_core::motion::{self, io as motion_io, MotionSample, CORRUPTION_LEVELS};
use rft_core::nn::{checkpoint, rng, ParamStore};
use rft_core::reward::{self, RewardModel};
use rft_core::spl;

use crate::config::ExperimentConfig;
use crate::diagnostics;
use crate::error::{LabError, Result};
use crate::eval::{self, MetricsReport};

pub type Generator = DiffusionModel<MlpDenoiser>;

pub const STAGES: [&str; 7] = [
    "gen-data",
    "pretrain-reward",
    "spl-refine",
    "pretrain-diffusion",
    "finetune",
    "evaluate",
    "diagnostics",
];

/// Diffusion step counts swept by the memory diagnostic.
pub const MEMORY_STEPS: [usize; 5] = [10, 20, 40, 50, 100];

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ LabError::Stage { .. } => e,
        e => LabError::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| LabError::io(path, e))
}

fn write_history(path: &Path, columns: &str, rows: &[(String, f64)]) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "{columns}")?;
        rows.iter().try_for_each(|(k, v)| writeln!(w, "{k},{v}"))
    })
}

fn epochs(tag: &str, losses: &[f64]) -> Vec<(String, f64)> {
    losses.iter().enumerate().map(|(i, &l)| (format!("{tag},{i}"), l)).collect()
}

impl Pipeline {
    /// Validates `config` and creates the output directory.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output.dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| LabError::io(&out, e))?;
        Ok(Pipeline { config, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, stage: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(LabError::MissingArtifact { path: p, stage })
        }
    }

    pub fn finetuned_name(kind: EngineKind) -> String {
        format!("finetuned_{}.ckpt", kind.name())
    }

    /// Runs every stage up to evaluation. With `finetune = false` the
    /// report holds baseline metrics only.
    pub fn run_all(&self, finetune: bool) -> Result<MetricsReport> {
        self.gen_data()?;
        self.pretrain_reward()?;
        self.spl_refine()?;
        self.pretrain_diffusion()?;
        if finetune {
            self.finetune()?;
        } else {
            let stale = self.path(&Self::finetuned_name(self.config.engine.kind));
            if stale.exists() {
                std::fs::remove_file(&stale).map_err(|e| LabError::io(&stale, e))?;
            }
        }
        self.evaluate()
    }

    pub fn gen_data(&self) -> Result<Vec<MotionSample>> {
        stage("gen-data", || {
            let c = &self.config.corpus;
            let samples = motion::generate_corpus(c.samples, c.labels, self.config.seeds.corpus, &c.motion)?;
            self.config.save(self.path("config.txt"))?;
            let snap = motion_io::Snapshot {
                config: c.motion.clone(),
                labels: c.labels,
                seed: self.config.seeds.corpus,
                samples,
            };
            let bin = self.path("corpus.bin");
            let file = std::fs::File::create(&bin).map_err(|e| LabError::io(&bin, e))?;
            motion_io::write_snapshot(std::io::BufWriter::new(file), &snap)?;
            let csv = self.path("corpus.csv");
            let file = std::fs::File::create(&csv).map_err(|e| LabError::io(&csv, e))?;
            motion_io::write_csv(std::io::BufWriter::new(file), &snap.samples, &c.motion)?;
            Ok(snap.samples)
        })
    }

    pub fn load_corpus(&self) -> Result<Vec<MotionSample>> {
        let path = self.require("corpus.bin", "gen-data")?;
        let file = std::fs::File::open(&path).map_err(|e| LabError::io(&path, e))?;
        let snap = motion_io::read_snapshot(std::io::BufReader::new(file))?;
        if snap.config != self.config.corpus.motion || snap.labels != self.config.corpus.labels {
            return Err(LabError::Config(format!("{} was generated with different corpus settings", path.display())));
        }
        Ok(snap.samples)
    }

    fn fresh_reward(&self) -> Result<RewardModel> {
        let cfg = &self.config;
        Ok(RewardModel::new(
            cfg.reward.model.clone(),
            cfg.corpus.motion.clone(),
            &mut rng::stream(cfg.seeds.reward, 60),
        )?)
    }

    pub fn load_reward(&self, name: &str, stage: &'static str) -> Result<RewardModel> {
        let path = self.require(name, stage)?;
        let mut m = self.fresh_reward()?;
        m.load_prefix(&path, "reward.")?;
        Ok(m)
    }

    pub fn fresh_generator(&self) -> Result<Generator> {
        let d = &self.config.diffusion;
        let schedule = d.schedule.build()?;
        let mut store = ParamStore::new();
        let mut net = MlpDenoiser::new(d.net.clone(), &mut store, &mut rng::stream(self.config.seeds.diffusion, 61));
        if d.precondition {
            net = net.preconditioned(schedule.alpha_bar(), d.sigma_data)?;
        }
        Ok(DiffusionModel::new(schedule, net, store))
    }

    pub fn load_generator(&self, name: &str, stage: &'static str) -> Result<Generator> {
        let path = self.require(name, stage)?;
        let mut g = self.fresh_generator()?;
        checkpoint::load_into(&mut g.params, &path)?;
        Ok(g)
    }

    pub fn pretrain_reward(&self) -> Result<RewardModel> {
        stage("pretrain-reward", || {
            let corpus = self.load_corpus()?;
            let cfg = &self.config;
            let seed = cfg.seeds.reward;
            let mut model = self.fresh_reward()?;
            let schedule = cfg.diffusion.schedule.build()?;
            let noise = cfg.reward.noise_aware.then_some(&schedule);
            let sem = reward::pretrain_semantic(&mut model, &corpus, noise, &cfg.reward.semantic, seed)?;
            let pairs = motion::build_preference_pairs(&corpus, &CORRUPTION_LEVELS, seed.wrapping_add(1), &cfg.corpus.motion)?;
            let pref = reward::train_preference(&mut model, &pairs, &cfg.reward.preference, seed.wrapping_add(2))?;
            let mut rows = epochs("semantic", &sem);
            rows.extend(epochs("preference", &pref));
            write_history(&self.path("reward_loss.csv"), "objective,epoch,loss", &rows)?;
            model.save(self.path("reward_pretrained.ckpt"))?;
            Ok(model)
        })
    }

    pub fn spl_refine(&self) -> Result<RewardModel> {
        stage("spl-refine", || {
            let corpus = self.load_corpus()?;
            let mut model = self.load_reward("reward_pretrained.ckpt", "pretrain-reward")?;
            let path = self.path("spl_mining.csv");
            let log = if self.config.spl.enabled {
                spl::refine(&mut model, &corpus, &self.config.spl.refine, self.config.seeds.reward.wrapping_add(3))?
            } else {
                spl::SplLog::default()
            };
            let file = std::fs::File::create(&path).map_err(|e| LabError::io(&path, e))?;
            log.write_csv(std::io::BufWriter::new(file))?;
            model.save(self.path("reward_refined.ckpt"))?;
            Ok(model)
        })
    }

    pub fn pretrain_diffusion(&self) -> Result<(Generator, RewardModel)> {
        stage("pretrain-diffusion", || {
            let corpus = self.load_corpus()?;
            let mut reward = self.load_reward("reward_refined.ckpt", "spl-refine")?;
            let cfg = &self.config;
            let mut gen = self.fresh_generator()?;
            let labels: Vec<usize> = corpus.iter().map(|s| s.label).collect();
            let loss = gen.pretrain(&motion::flat_matrix(&corpus), &labels, &cfg.diffusion.pretrain, cfg.seeds.diffusion)?;
            write_history(&self.path("diffusion_loss.csv"), "objective,epoch,loss", &epochs("eps", &loss))?;
            checkpoint::save(&gen.params, self.path("diffusion.ckpt"))?;

            let fakes = motion::build_deepfake_set(&corpus, &gen, cfg.seeds.diffusion.wrapping_add(1), &cfg.corpus.motion)?;
            let auth = reward::train_authenticity(&mut reward, &fakes, &cfg.reward.authenticity, cfg.seeds.reward.wrapping_add(4))?;
            write_history(&self.path("authenticity_loss.csv"), "objective,epoch,loss", &epochs("authenticity", &auth))?;
            reward.save(self.path("reward.ckpt"))?;
            Ok((gen, reward))
        })
    }

    /// Fine-tunes the pre-trained generator with the configured engine.
    pub fn finetune(&self) -> Result<EngineRun> {
        stage("finetune", || {
            let cfg = &self.config;
            let reward = self.load_reward("reward.ckpt", "pretrain-diffusion")?;
            let mut gen = self.load_generator("diffusion.ckpt", "pretrain-diffusion")?;
            let frozen = gen.clone();
            let ctx = RewardContext::new(&reward, cfg.engine.aggregator, cfg.engine.mode)?;
            let labels = repeat_labels(&cfg.engine.labels, cfg.eval.per_label);
            let seed = cfg.seeds.eval;
            let mut hook = |m: &Generator| eval::mean_aggregated_reward(&ctx, m, &frozen, &labels, seed).map_err(LabError::into_core);
            let run = run_engine(&mut gen, &reward, &cfg.engine, cfg.seeds.finetune, Some(&mut hook))?;
            let kind = cfg.engine.kind;
            checkpoint::save(&gen.params, self.path(&Self::finetuned_name(kind)))?;
            let trace = self.path(&format!("trace_{}.csv", kind.name()));
            let file = std::fs::File::create(&trace).map_err(|e| LabError::io(&trace, e))?;
            run.write_csv(std::io::BufWriter::new(file))?;
            write_file(&self.path(&format!("evals_{}.csv", kind.name())), |w| {
                writeln!(w, "iteration,millis,reward")?;
                run.evals.iter().try_for_each(|e| writeln!(w, "{},{},{}", e.iteration, e.millis, e.value))
            })?;
            Ok(run)
        })
    }

    /// Seed-replicated evaluation of the reward model, the pre-trained
    /// generator and, if present, the fine-tuned one. Repetitions run on
    /// separate threads.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        stage("evaluate", || {
            let corpus = self.load_corpus()?;
            let reward = self.load_reward("reward.ckpt", "pretrain-diffusion")?;
            let baseline = self.load_generator("diffusion.ckpt", "pretrain-diffusion")?;
            let tuned_name = Self::finetuned_name(self.config.engine.kind);
            let tuned = if self.path(&tuned_name).exists() {
                Some(self.load_generator(&tuned_name, "finetune")?)
            } else {
                None
            };
            let repeats = self.config.eval.repeats.max(1);
            let reps: Vec<Result<Vec<(String, f64)>>> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..repeats)
                    .map(|r| {
                        let (corpus, reward, baseline, tuned) = (&corpus, &reward, &baseline, tuned.as_ref());
                        s.spawn(move || self.evaluate_once(corpus, reward, baseline, tuned, r as u64))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(LabError::eval("evaluation thread panicked"))))
                    .collect()
            });
            let reps = reps.into_iter().collect::<Result<Vec<_>>>()?;
            let report = MetricsReport::from_repetitions(&reps)?;
            write_file(&self.path("metrics.csv"), |w| report.write_csv(w))?;
            write_file(&self.path("report.txt"), |w| report.write_report(w))?;
            Ok(report)
        })
    }

    fn evaluate_once(
        &self,
        corpus: &[MotionSample],
        reward: &RewardModel,
        baseline: &Generator,
        tuned: Option<&Generator>,
        rep: u64,
    ) -> Result<Vec<(String, f64)>> {
        let cfg = &self.config;
        let e = &cfg.eval;
        let seed = cfg.seeds.eval.wrapping_add(1000 * rep);
        let mut out = Vec::new();
        for (k, acc) in eval::eval_retrieval(reward, corpus, e.repr, e.candidates, &e.ks, seed)? {
            out.push((format!("retrieval.top{k}"), acc));
        }
        let pairs = motion::build_preference_pairs(corpus, &CORRUPTION_LEVELS, seed.wrapping_add(1), &cfg.corpus.motion)?;
        out.extend(eval::eval_preference(reward, &pairs, e.repr, seed.wrapping_add(2))?.named("preference"));
        let fakes = motion::build_deepfake_set(corpus, baseline, seed.wrapping_add(3), &cfg.corpus.motion)?;
        out.extend(eval::eval_deepfake(reward, &fakes, e.repr)?.named("deepfake"));

        let ctx = RewardContext::new(reward, cfg.engine.aggregator, cfg.engine.mode)?;
        let all: Vec<usize> = (0..cfg.corpus.labels).collect();
        let held = repeat_labels(&e.held_out_labels, e.per_label);
        let train = repeat_labels(&cfg.engine.labels, e.per_label);
        let every = repeat_labels(&all, e.per_label);
        let gen_seed = seed.wrapping_add(4);
        let mut models = vec![("baseline", baseline)];
        if let Some(t) = tuned {
            models.push(("finetuned", t));
        }
        for (name, m) in models {
            if !held.is_empty() {
                let r = eval::mean_aggregated_reward(&ctx, m, baseline, &held, gen_seed)?;
                out.push((format!("{name}.reward.held_out"), r));
            }
            out.push((format!("{name}.reward.train"), eval::mean_aggregated_reward(&ctx, m, baseline, &train, gen_seed)?));
            let parts = eval::mean_reward_parts(&ctx, m, baseline, &every, gen_seed)?;
            for (i, head) in ["semantic", "critic", "authenticity", "similarity"].iter().enumerate() {
                out.push((format!("{name}.{head}"), parts[i]));
            }
            let generated = eval::generate(m, &every, gen_seed, &cfg.corpus.motion)?;
            out.push((format!("{name}.frechet"), eval::eval_frechet(reward, &generated, corpus, e.repr)?));
        }
        Ok(out)
    }

    pub fn diagnostics(&self) -> Result<()> {
        stage("diagnostics", || {
            let cfg = &self.config;
            let dir = self.path("diagnostics");
            std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
            let corpus = self.load_corpus()?;
            let reward = self.load_reward("reward.ckpt", "pretrain-diffusion")?;
            let gen = self.load_generator("diffusion.ckpt", "pretrain-diffusion")?;
            let ctx = RewardContext::new(&reward, cfg.engine.aggregator, cfg.engine.mode)?;
            let labels = repeat_labels(&cfg.engine.labels, 1);
            let seed = cfg.seeds.eval;

            let grads = diagnostics::step_gradient_norms(&gen, &ctx, &labels, seed)?;
            diagnostics::write_grad_norms(&dir.join("grad_norm.csv"), &grads)?;
            let sim = diagnostics::noise_similarity(&reward, &corpus, &gen.schedule, seed)?;
            diagnostics::write_similarity(&dir.join("similarity.csv"), &sim)?;
            let mem = diagnostics::memory_comparison(&reward, &cfg.diffusion.net, &cfg.diffusion.schedule, &cfg.engine, &MEMORY_STEPS, seed)?;
            diagnostics::write_memory(&dir.join("memory.csv"), &mem)?;

            let mut runs = Vec::new();
            for kind in [EngineKind::Trajectory, EngineKind::EasyTune] {
                let mut engine = cfg.engine.clone();
                engine.kind = kind;
                engine.iterations = engine.iterations.min(2);
                engine.eval_every = 0;
                let mut g = gen.clone();
                runs.push(run_engine(&mut g, &reward, &engine, cfg.seeds.finetune, None)?);
            }
            diagnostics::write_live_nodes(&dir.join("live_nodes.csv"), &runs.iter().collect::<Vec<_>>())?;
            Ok(())
        })
    }
}

/// Each label `n` times, label-major.
pub fn repeat_labels(labels: &[usize], n: usize) -> Vec<usize> {
    labels.iter().flat_map(|&l| std::iter::repeat_n(l, n)).collect()
}
