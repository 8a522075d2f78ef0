//! Run directories: one resolved config, one subdirectory per stage.
//!
//! ```text
//! <out>/config.toml
//! <out>/pretrain/{metrics.jsonl, checkpoint.ldck}
//! <out>/zeroshot/{records.csv, results.csv, report.md, sr_*.svg}
//! <out>/finetune/{metrics.jsonl, checkpoint.ldck, eval/...}
//! <out>/baseline/{metrics.jsonl, checkpoint.ldck, eval/...}
//! ```

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::config::{Config, IntrinsicKind};
use crate::eval::{aggregate, emit_report, read_records_csv, write_records_csv, EvalRecord, Provenance};
use crate::imagination::Role;
use crate::protocol::{self, checkpoint_metadata, Agent, Deployment, MetricsLog, RunOutput, Stage};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ldck";
pub const RECORDS_FILE: &str = "records.csv";

pub struct RunDir {
    pub root: PathBuf,
    pub cfg: Config,
}

impl RunDir {
    /// Creates the directory with a config snapshot, or reopens it if the
    /// snapshot matches `cfg` exactly.
    pub fn open(root: &Path, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let snapshot = root.join(CONFIG_FILE);
        if snapshot.exists() {
            let existing = Config::load(&snapshot)?;
            if existing.hash() != cfg.hash() {
                return Err(Error::Config(format!(
                    "{} was created with config {}, this invocation resolves to {}",
                    root.display(),
                    existing.short_hash(),
                    cfg.short_hash()
                )));
            }
        } else {
            fs::create_dir_all(root)?;
            fs::write(&snapshot, cfg.to_toml())?;
        }
        Ok(Self { root: root.to_path_buf(), cfg: cfg.clone() })
    }

    pub fn seed(&self) -> u64 {
        self.cfg.protocol.seed
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn provenance(&self, stage: &str) -> Provenance {
        Provenance { config_hash: self.cfg.hash(), seed: self.seed(), stage: stage.to_string() }
    }

    fn train(
        &self,
        stage: Stage,
        run: impl FnOnce(&mut MetricsLog<BufWriter<File>>, &Path) -> Result<RunOutput>,
    ) -> Result<RunOutput> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir)?;
        let file = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
        let mut log = MetricsLog::new(file, stage, &self.cfg, self.seed())?;
        let out = run(&mut log, &dir)?;
        log.into_inner()?;
        let meta = checkpoint_metadata(&self.cfg, self.seed(), stage, &out.counters);
        out.agent.save(&dir.join(CHECKPOINT_FILE), meta)?;
        Ok(out)
    }

    fn load(&self, stage: Stage) -> Result<Agent> {
        let path = self.stage_dir(stage).join(CHECKPOINT_FILE);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no {} checkpoint in {}; run `{}` first",
                stage.name(),
                self.root.display(),
                stage.name()
            )));
        }
        let (agent, meta) = Agent::load(&self.cfg, &path)?;
        if meta.get("stage").map(String::as_str) != Some(stage.name()) {
            return Err(Error::Format(format!("{} is not a {} checkpoint", path.display(), stage.name())));
        }
        if meta.get("config_hash") != Some(&self.cfg.hash()) {
            return Err(Error::Config(format!("{} was written under a different config", path.display())));
        }
        Ok(agent)
    }

    pub fn pretrain(&self) -> Result<RunOutput> {
        self.train(Stage::Pretrain, |log, dir| protocol::pretrain(&self.cfg, self.seed(), log, Some(dir)))
    }

    pub fn finetune(&self) -> Result<RunOutput> {
        let agent = self.load(Stage::Pretrain)?;
        self.train(Stage::Finetune, |log, dir| protocol::finetune(&self.cfg, agent, self.seed(), log, Some(dir)))
    }

    pub fn baseline(&self) -> Result<RunOutput> {
        self.train(Stage::Baseline, |log, dir| protocol::baseline(&self.cfg, self.seed(), log, Some(dir)))
    }

    fn write_eval(&self, dir: &Path, stage: &str, records: &[EvalRecord]) -> Result<()> {
        let prov = self.provenance(stage);
        fs::create_dir_all(dir)?;
        write_records_csv(&dir.join(RECORDS_FILE), records, &prov)?;
        emit_report(dir, &aggregate(records), &prov)?;
        Ok(())
    }

    /// Frozen deployment of the pretrained exploration policy.
    pub fn zeroshot(&self, workers: usize) -> Result<Deployment> {
        let mut agent = self.load(Stage::Pretrain)?;
        let d = protocol::zeroshot(&self.cfg, &mut agent, self.seed(), workers)?;
        self.write_eval(&self.stage_dir(Stage::Zeroshot), Stage::Zeroshot.name(), &d.records)?;
        Ok(d)
    }

    /// Evaluates the task policy of a trained stage.
    pub fn eval(&self, stage: Stage, workers: usize) -> Result<Deployment> {
        let (role, method) = match stage {
            Stage::Pretrain | Stage::Zeroshot => return self.zeroshot(workers),
            Stage::Finetune => (Role::Task, format!("{}-finetune", self.cfg.intrinsic.kind.name())),
            Stage::Baseline => (Role::Task, "baseline".to_string()),
        };
        let mut agent = self.load(stage)?;
        if stage == Stage::Baseline && agent.kind() != IntrinsicKind::None {
            return Err(Error::Format("baseline checkpoint carries an intrinsic module".into()));
        }
        let d = protocol::deploy(&self.cfg, &mut agent, role, &method, self.seed(), workers)?;
        self.write_eval(&self.stage_dir(stage).join("eval"), &format!("{}-eval", stage.name()), &d.records)?;
        Ok(d)
    }
}

/// Merges record files and writes the aggregate report into `out`.
pub fn report(inputs: &[PathBuf], out: &Path, prov: &Provenance) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::InsufficientData("no record files given".into()));
    }
    let mut records = Vec::new();
    for p in inputs {
        records.extend(read_records_csv(p)?.1);
    }
    let agg = aggregate(&records);
    emit_report(out, &agg, prov)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        Config::smoke()
    }

    #[test]
    fn three_stages_compose() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::open(dir.path(), &tiny()).unwrap();
        assert!(run.zeroshot(1).is_err());
        run.pretrain().unwrap();
        let z = run.zeroshot(1).unwrap();
        assert_eq!(z.records.len(), 2);
        run.finetune().unwrap();
        run.eval(Stage::Finetune, 1).unwrap();
        for f in [
            "pretrain/metrics.jsonl",
            "pretrain/checkpoint.ldck",
            "zeroshot/records.csv",
            "zeroshot/report.md",
            "finetune/eval/results.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn a_different_config_cannot_reuse_the_directory() {
        let dir = tempfile::tempdir().unwrap();
        RunDir::open(dir.path(), &tiny()).unwrap();
        assert!(RunDir::open(dir.path(), &tiny()).is_ok());
        let mut other = tiny();
        other.protocol.seed = 9;
        assert!(matches!(RunDir::open(dir.path(), &other), Err(Error::Config(_))));
    }
}
