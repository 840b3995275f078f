use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use siri_core::pos::ablate_structural_invariance;
use siri_core::workload::{self, WorkloadSpec};
use siri_core::{Entry, Error, MbtMeta, Meta, MvmbMeta, PosConfig, Result, StructureKind};

#[derive(Debug, Clone, Parser)]
#[command(name = "bench", version, about = "Experiments over immutable content-addressed indexes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Operations per second and mean node visits under a YCSB-style mix.
    Throughput,
    /// Per-operation latency and path-length histograms.
    Latency,
    /// Store growth as versions accumulate.
    Storage,
    /// Sharing across group workloads (`--overlap`) or alpha versions (`--alpha`).
    Dedup,
    /// Sharing under POS node size, MBT bucket count and MPT key length sweeps.
    Params,
    /// Diff cost between independently built replicas.
    Diffbench,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentConfig {
    /// mpt, mbt, pos, mvmb or all.
    #[arg(long, global = true, default_value = "all")]
    pub structure: String,
    /// Record counts, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub n: Vec<usize>,
    #[arg(long, global = true, default_value_t = 0.0)]
    pub theta: f64,
    #[arg(long = "write-ratio", global = true, default_value_t = 0.5)]
    pub write_ratio: f64,
    /// Batch sizes, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub batch: Vec<usize>,
    /// Overlap ratios, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub overlap: Vec<f64>,
    /// Alpha values, comma separated. Switches `dedup` to version mode.
    #[arg(long, global = true, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    #[arg(long, global = true)]
    pub versions: Option<usize>,
    #[arg(long, global = true)]
    pub groups: Option<usize>,
    #[arg(long, global = true, env = "SIRI_SEED", default_value_t = 42)]
    pub seed: u64,
    /// CSV destination; standard output when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Operations per throughput or latency run.
    #[arg(long, global = true, default_value_t = 10_000)]
    pub ops: usize,
    #[arg(long = "key-min", global = true, default_value_t = 5)]
    pub key_min: usize,
    #[arg(long = "key-max", global = true, default_value_t = 15)]
    pub key_max: usize,
    #[arg(long = "value-mean", global = true, default_value_t = 256)]
    pub value_mean: usize,
    /// Records changed per replica in `diffbench`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub delta: Vec<usize>,
    /// `key<TAB>value-base64` records used instead of generated data.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long = "mbt-buckets", global = true)]
    pub mbt_buckets: Option<usize>,
    #[arg(long = "mbt-fanout", global = true)]
    pub mbt_fanout: Option<usize>,
    #[arg(long = "pos-node-bytes", global = true)]
    pub pos_node_bytes: Option<usize>,
    #[arg(long = "pos-window", global = true)]
    pub pos_window: Option<usize>,
    #[arg(long = "mvmb-order", global = true)]
    pub mvmb_order: Option<usize>,
    #[arg(long = "mvmb-leaf-capacity", global = true)]
    pub mvmb_leaf_capacity: Option<usize>,
    /// POS boundaries become history dependent.
    #[arg(long = "ablate-si", global = true)]
    pub ablate_si: bool,
    /// Every write copies the whole tree so versions share no nodes.
    #[arg(long = "ablate-ri", global = true)]
    pub ablate_ri: bool,
    #[arg(long, global = true, default_value_t = 5)]
    pub repetitions: usize,
    /// Reader threads for the read portion of `throughput` (0 = inline).
    #[arg(long, global = true, default_value_t = 0)]
    pub readers: usize,
}

impl ExperimentConfig {
    pub fn structures(&self) -> Result<Vec<StructureKind>> {
        if self.structure.eq_ignore_ascii_case("all") {
            return Ok(StructureKind::ALL.to_vec());
        }
        self.structure.split(',').map(|s| s.trim().parse()).collect()
    }

    /// Rejects structure parameters that do not apply to the selection.
    pub fn validate(&self) -> Result<()> {
        let kinds = self.structures()?;
        let check = |kind: StructureKind, given: bool, flag: &str| {
            if given && !kinds.contains(&kind) {
                Err(Error::Usage(format!("{flag} requires --structure {kind} or all")))
            } else {
                Ok(())
            }
        };
        check(StructureKind::Mbt, self.mbt_buckets.is_some() || self.mbt_fanout.is_some(), "--mbt-*")?;
        check(StructureKind::Pos, self.pos_node_bytes.is_some() || self.pos_window.is_some(), "--pos-*")?;
        check(StructureKind::Pos, self.ablate_si, "--ablate-si")?;
        check(
            StructureKind::Mvmb,
            self.mvmb_order.is_some() || self.mvmb_leaf_capacity.is_some(),
            "--mvmb-*",
        )?;
        if self.repetitions == 0 {
            return Err(Error::Usage("--repetitions must be positive".into()));
        }
        for kind in kinds {
            self.meta(kind)?;
        }
        self.spec(0).validate()
    }

    pub fn mbt_meta(&self) -> MbtMeta {
        let d = MbtMeta::default();
        MbtMeta::new(self.mbt_buckets.unwrap_or(d.buckets), self.mbt_fanout.unwrap_or(d.fanout))
    }

    pub fn pos_config(&self, node_bytes: Option<usize>) -> Result<PosConfig> {
        let mut cfg = PosConfig::with_node_bytes(node_bytes.or(self.pos_node_bytes).unwrap_or(1024))?;
        if let Some(w) = self.pos_window {
            cfg = cfg.with_window(w)?;
        }
        if self.ablate_si {
            cfg = ablate_structural_invariance(&cfg);
        }
        Ok(cfg)
    }

    pub fn meta(&self, kind: StructureKind) -> Result<Meta> {
        let meta = match kind {
            StructureKind::Mpt => Meta::Mpt,
            StructureKind::Mbt => Meta::Mbt(self.mbt_meta()),
            StructureKind::Pos => Meta::Pos(self.pos_config(None)?),
            StructureKind::Mvmb => {
                let mut m = MvmbMeta::default();
                if let Some(d) = self.mvmb_order {
                    m = MvmbMeta::textbook(d);
                }
                if let Some(c) = self.mvmb_leaf_capacity {
                    m.leaf_capacity = c;
                }
                Meta::Mvmb(m)
            }
        };
        match &meta {
            Meta::Mbt(m) => m.validate()?,
            Meta::Pos(c) => c.validate()?,
            Meta::Mvmb(m) => m.validate()?,
            Meta::Mpt => {}
        }
        Ok(meta)
    }

    pub fn spec(&self, n: usize) -> WorkloadSpec {
        WorkloadSpec {
            n_records: n,
            key_len_min: self.key_min,
            key_len_max: self.key_max,
            value_len_mean: self.value_mean,
            zipf_theta: self.theta,
            write_ratio: self.write_ratio,
            batch_size: 1,
            overlap_ratio: 0.0,
            groups: self.groups.unwrap_or(1),
            seed: self.seed,
        }
    }

    /// `n` records, generated or read from `--input`.
    pub fn dataset(&self, n: usize) -> Result<Vec<Entry>> {
        match &self.input {
            Some(path) => {
                let file = std::fs::File::open(path)?;
                let mut rows = workload::read_records(std::io::BufReader::new(file))?;
                let mut seen = std::collections::HashSet::new();
                rows.retain(|e| seen.insert(e.key.clone()));
                rows.truncate(n);
                Ok(rows)
            }
            None => workload::gen_dataset(&self.spec(n)),
        }
    }

    pub fn ns(&self, default: usize) -> Vec<usize> {
        if self.n.is_empty() {
            vec![default]
        } else {
            self.n.clone()
        }
    }

    pub fn batches(&self, default: usize) -> Vec<usize> {
        if self.batch.is_empty() {
            vec![default]
        } else {
            self.batch.clone()
        }
    }
}
