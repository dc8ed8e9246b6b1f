//! Shared state for the studies: the synthetic cohort plus caches of
//! datasets and pre-trained weights, so work common to several studies runs
//! once.
//!
//! Every cached value is a pure function of its key and the config, so the
//! order in which workers fill the caches never shows up in results.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use crate::array::{ArrayLayout, ReceptiveKernel};
use crate::dataset::{build_from_plans, hex_digest, plan_shifts, Dataset, ShiftPlan};
use crate::nn::NetworkParams;
use crate::seed::{self, tag};
use crate::shift::{bin_shift_with, ShiftBin, ShiftDistribution};
use crate::synth_eye::{plan_session, sample_subject, Session};
use crate::trainer::{pretrain_loso, PretrainPool, TrainConfig};
use crate::{Result, SubjectId};

/// Which of the other subjects' records enter a pre-training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PoolKind {
    All,
    /// Only records in the in-training shift bin (B1).
    InRange,
}

impl PoolKind {
    pub fn label(self) -> &'static str {
        match self {
            PoolKind::All => "all",
            PoolKind::InRange => "in_range",
        }
    }

    fn code(self) -> u64 {
        match self {
            PoolKind::All => 1,
            PoolKind::InRange => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PretrainKey {
    pub shift: String,
    pub pool: PoolKind,
    pub replicate: u64,
    pub target: SubjectId,
}

/// Record-level scan of one pre-training pool.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PoolAudit {
    pub key: PretrainKey,
    pub pool_subjects: BTreeSet<SubjectId>,
    pub records: usize,
}

impl PoolAudit {
    pub fn leaks(&self) -> bool {
        self.pool_subjects.contains(&self.key.target)
    }
}

type DatasetKey = (String, u64);

pub struct Workbench {
    config: ExperimentConfig,
    layout: ArrayLayout,
    kernel: ReceptiveKernel,
    sessions: Vec<Session>,
    datasets: Mutex<BTreeMap<DatasetKey, Arc<Vec<Dataset>>>>,
    pretrained: Mutex<BTreeMap<PretrainKey, Arc<NetworkParams>>>,
    audits: Mutex<Vec<PoolAudit>>,
}

/// Stable label of a shift distribution combined with the pairing policy.
pub fn shift_label(config: &ExperimentConfig, dist: &ShiftDistribution) -> String {
    format!("{dist} pairing={:?}", config.cohort.pairing)
}

fn label_code(label: &str) -> u64 {
    let hex = hex_digest(label.as_bytes());
    u64::from_str_radix(&hex[..16], 16).expect("hex digest")
}

impl Workbench {
    /// Plans (but does not render) one session per subject.
    pub fn new(config: ExperimentConfig) -> Result<Workbench> {
        config.validate()?;
        let cohort = &config.cohort;
        let sessions = (0..cohort.subjects)
            .map(|id| {
                let params = sample_subject(&cohort.anatomy, &cohort.eye, id, config.master_seed);
                plan_session(
                    &cohort.stimulus,
                    &params,
                    &cohort.image,
                    cohort.head_walk,
                    seed::derive(config.master_seed, &[tag::SESSION, id as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Workbench {
            layout: config.array.layout()?,
            kernel: config.array.kernel()?,
            config,
            sessions,
            datasets: Mutex::default(),
            pretrained: Mutex::default(),
            audits: Mutex::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn subjects(&self) -> Vec<SubjectId> {
        self.sessions.iter().map(Session::subject_id).collect()
    }

    /// Seed for `path`, mixed with the master seed.
    pub fn seed(&self, path: &[u64]) -> u64 {
        seed::derive(self.config.master_seed, path)
    }

    pub fn shift_code(&self, dist: &ShiftDistribution) -> u64 {
        label_code(&shift_label(&self.config, dist))
    }

    /// Builds every missing `(distribution, replicate)` dataset. Each
    /// subject's images are rendered once for all of them.
    pub fn prepare(&self, dists: &[ShiftDistribution]) -> Result<()> {
        let mut wanted: Vec<(DatasetKey, ShiftDistribution)> = Vec::new();
        {
            let cache = self.datasets.lock().expect("dataset cache");
            for dist in dists {
                for &rep in &self.config.seeds {
                    let key = (shift_label(&self.config, dist), rep);
                    if !cache.contains_key(&key) && !wanted.iter().any(|(k, _)| *k == key) {
                        wanted.push((key, *dist));
                    }
                }
            }
        }
        if wanted.is_empty() {
            return Ok(());
        }
        log::info!("building {} dataset groups for {} subjects", wanted.len(), self.sessions.len());
        let mut built: Vec<Vec<Dataset>> = vec![Vec::with_capacity(self.sessions.len()); wanted.len()];
        for session in &self.sessions {
            let subject = session.subject_id() as u64;
            let plans = wanted
                .iter()
                .map(|((label, rep), dist)| {
                    let s = self.seed(&[tag::SHIFTS, label_code(label), subject, *rep]);
                    plan_shifts(
                        std::slice::from_ref(session),
                        dist,
                        &self.layout,
                        self.config.cohort.pairing,
                        s,
                    )
                })
                .collect::<Result<Vec<ShiftPlan>>>()?;
            let sets = build_from_plans(std::slice::from_ref(session), &plans, &self.layout, &self.kernel)?;
            for (slot, d) in built.iter_mut().zip(sets) {
                slot.push(d);
            }
        }
        let mut cache = self.datasets.lock().expect("dataset cache");
        for ((key, _), sets) in wanted.into_iter().zip(built) {
            cache.insert(key, Arc::new(sets));
        }
        Ok(())
    }

    /// Per-subject datasets (indexed like [`Self::sessions`]).
    pub fn datasets(&self, dist: &ShiftDistribution, replicate: u64) -> Result<Arc<Vec<Dataset>>> {
        let key = (shift_label(&self.config, dist), replicate);
        if let Some(d) = self.datasets.lock().expect("dataset cache").get(&key) {
            return Ok(Arc::clone(d));
        }
        self.prepare(std::slice::from_ref(dist))?;
        Ok(Arc::clone(&self.datasets.lock().expect("dataset cache")[&key]))
    }

    fn pool_for(&self, dist: &ShiftDistribution, pool: PoolKind, replicate: u64, target: SubjectId) -> Result<PretrainPool> {
        let sets = self.datasets(dist, replicate)?;
        let norm = self.config.shift_bins.bin_norm;
        let members: Vec<Dataset> = sets
            .iter()
            .zip(&self.sessions)
            .filter(|(_, s)| s.subject_id() != target)
            .map(|(d, _)| match pool {
                PoolKind::All => d.clone(),
                PoolKind::InRange => {
                    let keep: Vec<usize> = (0..d.len())
                        .filter(|&i| bin_shift_with(&d.records()[i].shift, norm) == ShiftBin::B1)
                        .collect();
                    d.select(&keep)
                }
            })
            .collect();
        PretrainPool::new(target, &members)
    }

    pub fn pretrain_config(&self, dist: &ShiftDistribution, pool: PoolKind, replicate: u64, target: SubjectId) -> TrainConfig {
        let s = self.seed(&[tag::PRETRAIN, self.shift_code(dist), pool.code(), replicate, target as u64]);
        self.config.pretrain.train_config(&self.config.train, s)
    }

    /// Pre-trains every missing `(target, replicate)` model in parallel.
    pub fn ensure_pretrained(&self, dist: &ShiftDistribution, pool: PoolKind) -> Result<()> {
        self.prepare(std::slice::from_ref(dist))?;
        let label = shift_label(&self.config, dist);
        let missing: Vec<PretrainKey> = {
            let cache = self.pretrained.lock().expect("pretrain cache");
            self.config
                .seeds
                .iter()
                .flat_map(|&rep| {
                    self.subjects().into_iter().map({
                        let label = label.clone();
                        move |target| PretrainKey {
                            shift: label.clone(),
                            pool,
                            replicate: rep,
                            target,
                        }
                    })
                })
                .filter(|k| !cache.contains_key(k))
                .collect()
        };
        if missing.is_empty() {
            return Ok(());
        }
        log::info!("pre-training {} {} pools for {label}", missing.len(), pool.label());
        let trained = missing
            .par_iter()
            .map(|k| {
                let p = self.pool_for(dist, k.pool, k.replicate, k.target)?;
                let audit = PoolAudit {
                    key: k.clone(),
                    pool_subjects: p.dataset().records().iter().map(|r| r.subject_id).collect(),
                    records: p.dataset().len(),
                };
                let cfg = self.pretrain_config(dist, k.pool, k.replicate, k.target);
                Ok((audit, pretrain_loso(&p, &cfg)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cache = self.pretrained.lock().expect("pretrain cache");
        let mut audits = self.audits.lock().expect("audit log");
        for (k, (audit, params)) in missing.into_iter().zip(trained) {
            cache.insert(k, Arc::new(params));
            audits.push(audit);
        }
        Ok(())
    }

    pub fn pretrained(
        &self,
        dist: &ShiftDistribution,
        pool: PoolKind,
        replicate: u64,
        target: SubjectId,
    ) -> Result<Arc<NetworkParams>> {
        let key = PretrainKey {
            shift: shift_label(&self.config, dist),
            pool,
            replicate,
            target,
        };
        if let Some(p) = self.pretrained.lock().expect("pretrain cache").get(&key) {
            return Ok(Arc::clone(p));
        }
        self.ensure_pretrained(dist, pool)?;
        Ok(Arc::clone(&self.pretrained.lock().expect("pretrain cache")[&key]))
    }

    /// Every pool built so far, sorted by key.
    pub fn audits(&self) -> Vec<PoolAudit> {
        let mut v = self.audits.lock().expect("audit log").clone();
        v.sort();
        v
    }

    /// Subjects that fed the pool for `target`.
    pub fn pool_subjects(&self, dist: &ShiftDistribution, pool: PoolKind, replicate: u64, target: SubjectId) -> Vec<SubjectId> {
        let label = shift_label(&self.config, dist);
        self.audits
            .lock()
            .expect("audit log")
            .iter()
            .find(|a| a.key.shift == label && a.key.pool == pool && a.key.replicate == replicate && a.key.target == target)
            .map(|a| a.pool_subjects.iter().copied().collect())
            .unwrap_or_default()
    }
}
