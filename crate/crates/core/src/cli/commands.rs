use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Datelike, Days, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use crate::annindex::{snapshot, HnswConfig, HnswIndex};
use crate::catalog::{read_catalog, write_catalog, Catalog, ProductRecord};
use crate::engine::{serve, ActivityLog, DualIndexSet, EngineConfig, RecallOptions, SearchEngine};
use crate::error::{Error, Result};
use crate::evalkit::{
    expand_truth, merge_same_items, probe_pairs, run_offline_eval, synthetic_eval_queries, ClassifierTraining, EvalIndexes,
    EvalOptions, SameItemClassifier,
};
use crate::lifecycle::{
    build_index, build_index_from_partition, daily_job, day_key, parse_day, simulate_churn, CatalogSnapshot, DailyOptions,
    FeatureExtractor, I2iExtractor, MiemExtractor, PartitionStore,
};
use crate::losses::LossConfig;
use crate::towers::{checkpoint, PixelEmbedder, TowerConfig, TowerModel};
use crate::trainer::{
    generate_synthetic_logs, loss_grad_suite, train_stage, AdamWConfig, SyntheticCatalogSpec, SyntheticCorpus, TrainConfig,
};

/// Artifact locations under one workspace directory.
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model_dir().join("model.ckpt")
    }

    pub fn index(&self, name: &str) -> PathBuf {
        self.root.join("index").join(format!("{name}.snap"))
    }

    pub fn partitions(&self, name: &str) -> PathBuf {
        self.root.join("partitions").join(name)
    }

    pub fn daily_catalog(&self, day: NaiveDate) -> PathBuf {
        self.root.join("daily").join(format!("catalog-{}.jsonl", day_key(day)))
    }

    pub fn activity_log(&self) -> PathBuf {
        self.root.join("logs").join("activity.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::State(format!("{what} not found at {}; run `{hint}` first", path.display())))
    }
}

pub fn corpus_spec(cfg: &Config) -> Result<SyntheticCatalogSpec> {
    Ok(SyntheticCatalogSpec {
        classes: cfg.get("classes")?,
        items_per_class: cfg.get("items")?,
        images_per_item: (cfg.get("images_min")?, cfg.get("images_max")?),
        twin_fraction: cfg.get("twin_fraction")?,
        triplets_per_item: cfg.get("triplets_per_item")?,
        seed: cfg.get("seed")?,
        ..SyntheticCatalogSpec::default()
    })
}

pub fn gen_data(ws: &Workspace, cfg: &Config) -> Result<SyntheticCorpus> {
    let corpus = generate_synthetic_logs(&corpus_spec(cfg)?)?;
    corpus.save(&ws.data())?;
    println!(
        "wrote {} products and {} click logs to {}",
        corpus.catalog.len(),
        corpus.logs.len(),
        ws.data().display()
    );
    Ok(corpus)
}

fn load_or_generate(ws: &Workspace, cfg: &Config) -> Result<SyntheticCorpus> {
    if ws.data().join("spec.json").exists() {
        SyntheticCorpus::load(&ws.data())
    } else {
        println!("no corpus in {}; generating one", ws.data().display());
        gen_data(ws, cfg)
    }
}

fn train_config(cfg: &Config, stage: u8) -> Result<TrainConfig> {
    let mut t = TrainConfig::for_stage(stage);
    t.epochs = cfg.get(&format!("epochs{stage}"))?;
    t.optimizer = AdamWConfig {
        lr: cfg.get(if stage == 1 { "lr1" } else { "lr2" })?,
        ..t.optimizer
    };
    t.batch_size = cfg.get("batch_size")?;
    t.k = cfg.get("k_images")?;
    t.seed = cfg.get("seed")?;
    t.loss = LossConfig {
        gamma: cfg.get("gamma")?,
        margin: cfg.get("margin")?,
        xbm_capacity: cfg.get("xbm_capacity")?,
        batch_size: t.batch_size,
    };
    Ok(t)
}

/// Trains `stages` in order, saving the checkpoint after each.
pub fn train(ws: &Workspace, cfg: &Config, stages: &[u8]) -> Result<()> {
    let corpus = load_or_generate(ws, cfg)?;
    let mut model = if stages[0] == 1 {
        let spec = &corpus.spec;
        TowerModel::new(TowerConfig {
            image_size: spec.image_size,
            patch_size: spec.patch_size,
            vocab_size: spec.vocab_size,
            max_title_len: spec.max_title_len,
            token_dim: cfg.get("token_dim")?,
            heads: cfg.get("heads")?,
            image_layers: cfg.get("image_layers")?,
            title_layers: cfg.get("title_layers")?,
            fusion_layers: cfg.get("fusion_layers")?,
            out_dim: cfg.get("out_dim")?,
            k_images: cfg.get("k_images")?,
            seed: cfg.get("seed")?,
            ..TowerConfig::default()
        })?
    } else {
        require(&ws.checkpoint(), "checkpoint", "train 1")?;
        checkpoint::load(&ws.checkpoint())?
    };
    fs::create_dir_all(ws.model_dir())?;
    for &stage in stages {
        let tc = train_config(cfg, stage)?;
        let start = std::time::Instant::now();
        let curve = train_stage(&mut model, &corpus.logs, &tc)?;
        let (head, tail) = curve.head_tail_means(50);
        println!(
            "stage {stage}: {} epochs, {} steps, loss {head:.4} -> {tail:.4} in {:.1?}",
            tc.epochs,
            curve.points.len(),
            start.elapsed()
        );
        curve.write_csv(&ws.model_dir().join(format!("loss-stage{stage}.csv")))?;
        checkpoint::save(&model, &ws.model_dir().join(format!("stage{stage}.ckpt")))?;
        checkpoint::save(&model, &ws.checkpoint())?;
    }
    println!("checkpoint {} ({})", ws.checkpoint().display(), checkpoint::fingerprint(&model));
    Ok(())
}

fn hnsw(cfg: &Config, dim: usize) -> Result<HnswConfig> {
    Ok(HnswConfig {
        m: cfg.get("hnsw_m")?,
        m_max0: 2 * cfg.get::<usize>("hnsw_m")?,
        ef_construction: cfg.get("ef_construction")?,
        ef_search: cfg.get("ef_search")?,
        seed: cfg.get("seed")?,
        ..HnswConfig::new(dim)
    })
}

fn load_model(ws: &Workspace) -> Result<TowerModel> {
    require(&ws.checkpoint(), "checkpoint", "train all")?;
    checkpoint::load(&ws.checkpoint())
}

/// The catalog the indexes currently describe: the newest simulated day,
/// or the generated corpus before any daily job.
fn current_catalog(ws: &Workspace) -> Result<Vec<ProductRecord>> {
    if ws.partitions("miem").exists() {
        if let Some(day) = PartitionStore::open(&ws.partitions("miem"), 1)?.latest()? {
            return read_catalog(&ws.daily_catalog(day));
        }
    }
    require(&ws.data().join("catalog.jsonl"), "catalog", "gen-data")?;
    read_catalog(&ws.data().join("catalog.jsonl"))
}

pub fn build_indexes(ws: &Workspace, cfg: &Config) -> Result<()> {
    let model = load_model(ws)?;
    let records = current_catalog(ws)?;
    let (size, patch) = model.config().grid();
    let i2i_ex = I2iExtractor::new(PixelEmbedder::new(size, patch));
    let miem_ex = MiemExtractor::new(&model)?;
    for (name, ex) in [("i2i", &i2i_ex as &dyn FeatureExtractor), ("miem", &miem_ex)] {
        let (index, failures) = build_index(&records, ex, hnsw(cfg, ex.dim())?)?;
        for f in &failures {
            log::warn!("{} left out of the {name} index: {}", f.product_id, f.reason);
        }
        fs::create_dir_all(ws.index(name).parent().expect("index dir"))?;
        snapshot::save(&index, &ws.index(name))?;
        println!("{name}: {} entries -> {}", index.len(), ws.index(name).display());
    }
    Ok(())
}

/// Simulates one catalog day and runs the daily job for both indexes.
pub fn daily(ws: &Workspace, cfg: &Config, day: Option<NaiveDate>) -> Result<()> {
    let model = load_model(ws)?;
    let retention: usize = cfg.get("retention")?;
    let stores = [
        ("miem", PartitionStore::open(&ws.partitions("miem"), retention)?),
        ("i2i", PartitionStore::open(&ws.partitions("i2i"), retention)?),
    ];
    let latest = stores[0].1.latest()?;
    let day = match (day, latest) {
        (Some(d), _) => d,
        (None, Some(l)) => l
            .checked_add_days(Days::new(1))
            .ok_or_else(|| Error::Domain("day overflow".into()))?,
        (None, None) => parse_day(cfg.raw("start_day")).map_err(|e| Error::Usage(e.to_string()))?,
    };
    let records = if ws.daily_catalog(day).exists() {
        read_catalog(&ws.daily_catalog(day))?
    } else {
        let records = match stores[0].1.latest_before(day)? {
            Some(prev) => {
                let before = read_catalog(&ws.daily_catalog(prev))?;
                let seed = cfg.get::<u64>("seed")? ^ day.num_days_from_ce() as u64;
                simulate_churn(&before, cfg.get("churn")?, &mut ChaCha8Rng::seed_from_u64(seed), &day_key(day))
            }
            None => {
                require(&ws.data().join("catalog.jsonl"), "catalog", "gen-data")?;
                read_catalog(&ws.data().join("catalog.jsonl"))?
            }
        };
        fs::create_dir_all(ws.daily_catalog(day).parent().expect("daily dir"))?;
        write_catalog(&ws.daily_catalog(day), &records)?;
        records
    };
    let snap = CatalogSnapshot::new(day, records)?;
    let (size, patch) = model.config().grid();
    let i2i_ex = I2iExtractor::new(PixelEmbedder::new(size, patch));
    let miem_ex = MiemExtractor::new(&model)?;
    let hash = checkpoint::fingerprint(&model);
    for (name, store) in &stores {
        let ex: &dyn FeatureExtractor = if *name == "miem" { &miem_ex } else { &i2i_ex };
        let path = ws.index(name);
        let mut index = if path.exists() {
            snapshot::load(&path)?
        } else {
            HnswIndex::new(hnsw(cfg, ex.dim())?)?
        };
        let opts = DailyOptions {
            bootstrap: store.latest_before(day)?.is_none(),
        };
        let out = daily_job(store, &snap, ex, &mut index, &hash, opts)?;
        if index.needs_rebuild() {
            index = build_index_from_partition(&out.partition, *index.config())?;
            println!("{name}: rebuilt from the {} partition", day_key(day));
        }
        fs::create_dir_all(path.parent().expect("index dir"))?;
        snapshot::save(&index, &path)?;
        println!("{name}: {}", serde_json::to_string(&out.report)?);
    }
    Ok(())
}

fn engine_config(cfg: &Config) -> Result<EngineConfig> {
    Ok(EngineConfig {
        fusion_weight: cfg.get("fusion_weight")?,
        popularity_weight: cfg.get("popularity_weight")?,
        crop_fraction: cfg.get("crop_fraction")?,
        recall: RecallOptions {
            ef_search: cfg.get("ef_search")?,
            ..RecallOptions::default()
        },
        default_page_size: cfg.get("page_size")?,
        ..EngineConfig::default()
    })
}

fn load_indexes(ws: &Workspace) -> Result<(HnswIndex, HnswIndex)> {
    let (i2i, miem) = (ws.index("i2i"), ws.index("miem"));
    require(&i2i, "I2I index", "build-index")?;
    require(&miem, "MIEM index", "build-index")?;
    Ok((snapshot::load(&i2i)?, snapshot::load(&miem)?))
}

pub fn serve_http(ws: &Workspace, cfg: &Config, addr: &str) -> Result<()> {
    let addr: SocketAddr = addr
        .parse()
        .map_err(|_| Error::Usage(format!("'{addr}' is not a socket address")))?;
    let model = Arc::new(load_model(ws)?);
    let (i2i, miem) = load_indexes(ws)?;
    let set = DualIndexSet::new(i2i, miem, Catalog::from_records(&current_catalog(ws)?)?)?;
    fs::create_dir_all(ws.activity_log().parent().expect("log dir"))?;
    let log = ActivityLog::open(&ws.activity_log())?;
    let engine = Arc::new(SearchEngine::new(model, set, log, engine_config(cfg)?)?);
    println!("serving on http://{addr} (POST /search, POST /event, GET /healthz)");
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(engine, addr))
}

pub fn eval(ws: &Workspace, cfg: &Config) -> Result<()> {
    let model = load_model(ws)?;
    let (i2i, miem) = load_indexes(ws)?;
    require(&ws.data().join("spec.json"), "corpus", "gen-data")?;
    let corpus = SyntheticCorpus::load(&ws.data())?;
    let records = current_catalog(ws)?;
    let pair = if cfg.get::<bool>("eval_pair")? {
        let ex = crate::lifecycle::PairExtractor::new(&model)?;
        Some(build_index(&records, &ex, hnsw(cfg, ex.dim())?)?.0)
    } else {
        None
    };
    let indexes = EvalIndexes {
        i2i,
        miem,
        pair,
        catalog: Catalog::from_records(&records)?,
    };
    let mut queries = synthetic_eval_queries(&corpus, cfg.get("eval_views")?, cfg.get::<u64>("seed")? ^ 0x5eed)?;
    queries.retain(|q| q.truth.iter().all(|p| indexes.catalog.contains(p)));
    if cfg.get::<bool>("merge")? {
        let ids: Vec<String> = records.iter().map(|r| r.product_id.clone()).collect();
        let item_of: std::collections::HashMap<&str, usize> = corpus
            .catalog
            .iter()
            .zip(&corpus.truth.latent_item)
            .map(|(r, li)| (r.product_id.as_str(), *li))
            .collect();
        let same = |a: &str, b: &str| matches!((item_of.get(a), item_of.get(b)), (Some(x), Some(y)) if x == y);
        let k: usize = cfg.get("merge_k")?;
        let pairs = probe_pairs(&indexes.i2i, k, same)?;
        let mut clf = SameItemClassifier::new(indexes.i2i.dim(), 32, cfg.get("seed")?)?;
        clf.train(&pairs, &ClassifierTraining::default())?;
        let groups = merge_same_items(&ids, &indexes.i2i, &clf, k)?;
        let merged = groups.groups().iter().filter(|g| g.len() > 1).count();
        println!("same-item merging: {} labeled pairs, {merged} merged groups", pairs.len());
        expand_truth(&mut queries, &groups);
    }
    let opts = EvalOptions {
        depth: cfg.get("eval_depth")?,
        recall: RecallOptions {
            ef_search: cfg.get("ef_search")?,
            ..RecallOptions::default()
        },
        fusion_weight: cfg.get("fusion_weight")?,
        weight_grid: cfg.list("weight_grid")?,
    };
    let report = run_offline_eval(&model, &indexes, &queries, &opts)?;
    fs::create_dir_all(ws.reports())?;
    fs::write(ws.reports().join("eval.csv"), report.to_csv()?)?;
    fs::write(ws.reports().join("eval.txt"), report.to_text())?;
    print!("{}", report.to_text());
    println!("report -> {}", ws.reports().join("eval.csv").display());
    Ok(())
}

/// Runs the loss gradient checks for `rounds` seeds from `seed`; fails if
/// any relative error reaches `1e-4`.
pub fn gradcheck(seed: u64, rounds: u64) -> Result<()> {
    let mut worst = 0.0f64;
    for s in seed..seed + rounds {
        for (name, r) in loss_grad_suite(s)? {
            println!("seed {s} {name:<22} max rel error {:.3e} over {} coords", r.max_rel_error, r.checked);
            worst = worst.max(r.max_rel_error);
        }
    }
    if worst < 1e-4 {
        println!("ok: worst relative error {worst:.3e}");
        Ok(())
    } else {
        Err(Error::Numeric(format!("worst relative error {worst:.3e} is not below 1e-4")))
    }
}
