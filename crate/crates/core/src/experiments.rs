//! Scaling sweep and ablation harnesses over the synthetic world.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{ImageRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{build_eval_set, evaluate, EvalProtocol, EvalReport, QueryCase, QueryMode};
use crate::text::Tokenizer;
use crate::train::{finetune_combiner, train, TrainConfig, TrainLog};
use crate::triplets::{build_dataset, CaptionBackend, PairSamplingConfig, ReformulationBackend, TripletDataset};
use crate::world::generate_world;

/// Images eligible for training pairs: everything outside the query split.
pub fn training_pool(images: &[ImageRecord]) -> Vec<ImageRecord> {
    images.iter().filter(|im| im.split != Split::Query).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Targets from the online parameters, with gradient.
    NoEma,
    /// No cross-attention, on top of dropping the moving-average target.
    NoCrossAttention,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoEma, Variant::NoCrossAttention];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEma => "no_ema",
            Variant::NoCrossAttention => "no_cross_attention",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        out.no_ema = matches!(self, Variant::NoEma | Variant::NoCrossAttention);
        out.no_cross_attention = self == Variant::NoCrossAttention;
        out
    }
}

/// A generated world with its evaluation set and backends, shared by every
/// run of an experiment.
pub struct Workbench {
    pub cfg: RunConfig,
    pub images: Vec<ImageRecord>,
    pub cases: Vec<QueryCase>,
    pub tokenizer: Tokenizer,
    captioner: Box<dyn CaptionBackend>,
    reformulator: Box<dyn ReformulationBackend>,
}

impl Workbench {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let images = generate_world(&cfg.world)?;
        Self::with_images(cfg, images)
    }

    pub fn with_images(cfg: &RunConfig, images: Vec<ImageRecord>) -> Result<Self> {
        let (captioner, reformulator) = cfg.backend.build(&cfg.world)?;
        let cases = build_eval_set(&images, &*captioner, &*reformulator, &cfg.eval_set, cfg.backend.word_cap)?;
        Ok(Self {
            cfg: cfg.clone(),
            tokenizer: Tokenizer::for_world(&cfg.world),
            images,
            cases,
            captioner,
            reformulator,
        })
    }

    pub fn dataset(&self, n_pairs: usize, seed: u64) -> Result<TripletDataset> {
        let sampling = PairSamplingConfig {
            n_pairs,
            seed,
            ..self.cfg.sampling.clone()
        };
        build_dataset(
            &training_pool(&self.images),
            &sampling,
            &*self.captioner,
            &*self.reformulator,
            self.cfg.backend.word_cap,
        )
    }

    /// Trains one variant (backbone, then the λ combiner) with every seed set to `seed`.
    pub fn train_variant(&self, dataset: &TripletDataset, variant: Variant, seed: u64) -> Result<(Checkpoint, TrainLog)> {
        let mut model = self.cfg.model.clone();
        model.seed = seed;
        let mut tcfg = variant.apply(&self.cfg.train);
        tcfg.seed = seed;
        let (ckpt, log) = train(dataset, &self.images, &model, self.tokenizer.clone(), &tcfg)?;
        let (ckpt, _) = finetune_combiner(&ckpt, dataset, &self.images, &tcfg)?;
        Ok((ckpt, log))
    }

    pub fn evaluate(&self, ckpt: &Checkpoint, protocol: &EvalProtocol) -> Result<EvalReport> {
        evaluate(ckpt, &self.images, &self.cases, protocol)
    }
}

/// Protocol used inside sweeps: network output and fused query, no ranked lists.
pub fn harness_protocol(base: &EvalProtocol) -> EvalProtocol {
    EvalProtocol {
        modes: vec![QueryMode::Reformulated, QueryMode::Fused],
        ranking_depth: 0,
        per_meta_class: false,
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub final_loss: f64,
}

fn run_result(seed: u64, report: &EvalReport, log: &TrainLog) -> Result<RunResult> {
    let metrics = report
        .mode(QueryMode::Reformulated)
        .ok_or_else(|| Error::InvalidConfig("harness protocol must score e_r".into()))?
        .metrics
        .clone();
    Ok(RunResult {
        seed,
        metrics,
        final_loss: log.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN),
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_metrics(runs: &[RunResult]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(first) = runs.first() {
        for name in first.metrics.keys() {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(name).copied()).collect();
            out.insert(name.clone(), median(&vals));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_triplets: usize,
    pub runs: Vec<RunResult>,
    pub median: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

/// One training run per (count, seed). The dataset for a seed is drawn at
/// the largest count and each smaller count uses its prefix, so the sets
/// are nested.
pub fn scale_sweep(bench: &Workbench) -> Result<SweepResult> {
    let spec = &bench.cfg.sweep;
    spec.validate()?;
    let protocol = harness_protocol(&bench.cfg.eval);
    let max = *spec.counts.last().expect("validated");
    let mut per_count: Vec<Vec<RunResult>> = vec![Vec::new(); spec.counts.len()];
    for &seed in &spec.seeds {
        let full = bench.dataset(max, seed)?;
        for (i, &n) in spec.counts.iter().enumerate() {
            let ds = TripletDataset {
                triplets: full.triplets[..n].to_vec(),
            };
            let (ckpt, log) = bench.train_variant(&ds, Variant::Full, seed)?;
            let report = bench.evaluate(&ckpt, &protocol)?;
            let r = run_result(seed, &report, &log)?;
            log::info!("sweep n={n} seed={seed} R@1={:.4}", r.metrics.get("R@1").copied().unwrap_or(0.0));
            per_count[i].push(r);
        }
    }
    Ok(SweepResult {
        points: spec
            .counts
            .iter()
            .zip(per_count)
            .map(|(&n, runs)| SweepPoint {
                n_triplets: n,
                median: median_metrics(&runs),
                runs,
            })
            .collect(),
    })
}

fn metric_names(points: &[BTreeMap<String, f64>]) -> Vec<String> {
    let mut names: Vec<String> = points.iter().flat_map(|m| m.keys().cloned()).collect();
    names.sort();
    names.dedup();
    // R@K columns first in numeric K order, then the rest.
    names.sort_by_key(|n| {
        let k = n.strip_prefix("R@").and_then(|k| k.parse::<usize>().ok());
        (k.is_none(), k.unwrap_or(0), n.clone())
    });
    names
}

fn percent_cells(names: &[String], m: &BTreeMap<String, f64>) -> Vec<String> {
    names
        .iter()
        .map(|k| m.get(k).map(|v| format!("{:.2}", v * 100.0)).unwrap_or_default())
        .collect()
}

impl SweepResult {
    /// One row per count, `n_triplets,<metrics...>`, median percentages over seeds.
    pub fn to_csv(&self) -> String {
        let all: Vec<BTreeMap<String, f64>> = self.points.iter().map(|p| p.median.clone()).collect();
        let names = metric_names(&all);
        let mut out = format!("n_triplets,{}\n", names.join(","));
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.n_triplets, percent_cells(&names, &p.median).join(","));
        }
        out
    }

    /// One row per (count, seed), `n_triplets,seed,<metrics...>`.
    pub fn runs_csv(&self) -> String {
        let all: Vec<BTreeMap<String, f64>> = self.points.iter().map(|p| p.median.clone()).collect();
        let names = metric_names(&all);
        let mut out = format!("n_triplets,seed,{}\n", names.join(","));
        for p in &self.points {
            for r in &p.runs {
                let _ = writeln!(out, "{},{},{}", p.n_triplets, r.seed, percent_cells(&names, &r.metrics).join(","));
            }
        }
        out
    }

    pub fn median_series(&self, metric: &str) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .map(|p| (p.n_triplets, p.median.get(metric).copied().unwrap_or(f64::NAN)))
            .collect()
    }
}

/// Median curves over `log(n_triplets)`, one colour per metric, on a white
/// canvas with axes and a 10-point grid.
pub fn render_sweep_plot(result: &SweepResult, metrics: &[&str], path: &Path) -> Result<()> {
    const W: u32 = 640;
    const H: u32 = 400;
    const PAD: f64 = 40.0;
    const COLORS: [[u8; 3]; 4] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [148, 103, 189]];
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let xs: Vec<f64> = result.points.iter().map(|p| (p.n_triplets as f64).ln()).collect();
    let (x0, x1) = match (xs.first(), xs.last()) {
        (Some(a), Some(b)) if b > a => (*a, *b),
        (Some(a), _) => (a - 1.0, a + 1.0),
        _ => return Err(Error::InvalidConfig("sweep has no points".into())),
    };
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W as f64 - 2.0 * PAD);
    let py = |y: f64| H as f64 - PAD - y * (H as f64 - 2.0 * PAD);
    let put = |img: &mut image::RgbImage, x: f64, y: f64, c: [u8; 3]| {
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        if xi >= 0 && yi >= 0 && (xi as u32) < W && (yi as u32) < H {
            img.put_pixel(xi as u32, yi as u32, image::Rgb(c));
        }
    };
    for tick in 0..=10 {
        let y = py(tick as f64 / 10.0);
        for x in PAD as u32..W - PAD as u32 {
            put(&mut img, x as f64, y, if tick == 0 { [0, 0, 0] } else { [225, 225, 225] });
        }
    }
    for y in PAD as u32..=(H - PAD as u32) {
        put(&mut img, PAD, y as f64, [0, 0, 0]);
    }
    for &x in &xs {
        for dy in 0..6 {
            put(&mut img, px(x), py(0.0) + dy as f64, [0, 0, 0]);
        }
    }
    for (mi, metric) in metrics.iter().enumerate() {
        let c = COLORS[mi % COLORS.len()];
        let series = result.median_series(metric);
        let pts: Vec<(f64, f64)> = series
            .iter()
            .zip(&xs)
            .filter(|((_, v), _)| v.is_finite())
            .map(|((_, v), &x)| (px(x), py(*v)))
            .collect();
        for w in pts.windows(2) {
            let steps = ((w[1].0 - w[0].0).abs().max((w[1].1 - w[0].1).abs()) as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                put(&mut img, w[0].0 + t * (w[1].0 - w[0].0), w[0].1 + t * (w[1].1 - w[0].1), c);
            }
        }
        for &(x, y) in &pts {
            for dx in -2..=2 {
                for dy in -2..=2 {
                    put(&mut img, x + dx as f64, y + dy as f64, c);
                }
            }
        }
    }
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format("png", e.to_string()))?;
    artifact::write_atomic(path, &bytes.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub runs: Vec<RunResult>,
    pub median: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub n_triplets: usize,
    pub rows: Vec<AblationRow>,
}

/// Every variant on the same dataset and seeds.
pub fn ablate(bench: &Workbench) -> Result<AblationResult> {
    let seeds = &bench.cfg.ablation.seeds;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation.seeds must be non-empty".into()));
    }
    let protocol = harness_protocol(&bench.cfg.eval);
    let n = bench.cfg.sampling.n_pairs;
    let mut runs: BTreeMap<Variant, Vec<RunResult>> = BTreeMap::new();
    for &seed in seeds {
        let ds = bench.dataset(n, seed)?;
        for v in Variant::ALL {
            let (ckpt, log) = bench.train_variant(&ds, v, seed)?;
            let report = bench.evaluate(&ckpt, &protocol)?;
            let r = run_result(seed, &report, &log)?;
            log::info!("ablate {} seed={seed} R@1={:.4}", v.label(), r.metrics.get("R@1").copied().unwrap_or(0.0));
            runs.entry(v).or_default().push(r);
        }
    }
    Ok(AblationResult {
        n_triplets: n,
        rows: runs
            .into_iter()
            .map(|(variant, runs)| AblationRow {
                variant,
                median: median_metrics(&runs),
                runs,
            })
            .collect(),
    })
}

impl AblationResult {
    pub fn median(&self, variant: Variant, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .and_then(|r| r.median.get(metric).copied())
    }

    /// Markdown comparison of median percentages.
    pub fn to_markdown(&self) -> String {
        let all: Vec<BTreeMap<String, f64>> = self.rows.iter().map(|r| r.median.clone()).collect();
        let names = metric_names(&all);
        let mut out = format!("| variant | {} |\n|---|{}\n", names.join(" | "), "---|".repeat(names.len()));
        for r in &self.rows {
            let cells: Vec<String> = names
                .iter()
                .map(|k| r.median.get(k).map(|v| format!("{:.2}", v * 100.0)).unwrap_or_else(|| "-".into()))
                .collect();
            let _ = writeln!(out, "| {} | {} |", r.variant.label(), cells.join(" | "));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let all: Vec<BTreeMap<String, f64>> = self.rows.iter().map(|r| r.median.clone()).collect();
        let names = metric_names(&all);
        let mut out = format!("variant,seed,{}\n", names.join(","));
        for r in &self.rows {
            let mut line = |seed: &str, m: &BTreeMap<String, f64>| {
                let _ = writeln!(out, "{},{seed},{}", r.variant.label(), percent_cells(&names, m).join(","));
            };
            for run in &r.runs {
                line(&run.seed.to_string(), &run.metrics);
            }
            line("median", &r.median);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn variants_toggle_flags() {
        let base = TrainConfig::default();
        assert!(!Variant::Full.apply(&base).no_ema);
        assert!(Variant::NoEma.apply(&base).no_ema);
        let nc = Variant::NoCrossAttention.apply(&base);
        assert!(nc.no_ema && nc.no_cross_attention);
    }

    #[test]
    fn csv_rows() {
        let run = |seed, r1| RunResult {
            seed,
            metrics: BTreeMap::from([("R@1".to_string(), r1), ("R@10".to_string(), 0.5)]),
            final_loss: 1.0,
        };
        let runs = vec![run(0, 0.1), run(1, 0.3)];
        let res = SweepResult {
            points: vec![SweepPoint {
                n_triplets: 500,
                median: median_metrics(&runs),
                runs,
            }],
        };
        assert_eq!(res.to_csv(), "n_triplets,R@1,R@10\n500,20.00,50.00\n");
        let runs = res.runs_csv();
        let lines: Vec<&str> = runs.lines().collect();
        assert_eq!(lines, ["n_triplets,seed,R@1,R@10", "500,0,10.00,50.00", "500,1,30.00,50.00"]);
    }
}
