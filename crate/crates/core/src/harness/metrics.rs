use serde::{Deserialize, Serialize};

/// `2 b n / (b + n)`, or 0 when both are 0.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base + novel > 0.0 {
        2.0 * base * novel / (base + novel)
    } else {
        0.0
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
}

impl SeedMetrics {
    pub fn new(seed: u64, base: f64, novel: f64) -> Self {
        Self {
            seed,
            base,
            novel,
            hm: harmonic_mean(base, novel),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Per-seed rows plus their aggregate, ordered by seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_seed: Vec<SeedMetrics>,
    /// Seeds that failed, with the error message.
    pub failures: Vec<(u64, String)>,
    pub base: Summary,
    pub novel: Summary,
    pub hm: Summary,
}

impl MetricsReport {
    pub fn from_seeds(mut per_seed: Vec<SeedMetrics>, mut failures: Vec<(u64, String)>) -> Self {
        per_seed.sort_by_key(|m| m.seed);
        failures.sort_by_key(|f| f.0);
        let summary = |f: fn(&SeedMetrics) -> f64| {
            let (mean, std) = mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
            Summary { mean, std }
        };
        Self {
            base: summary(|m| m.base),
            novel: summary(|m| m.novel),
            hm: summary(|m| m.hm),
            per_seed,
            failures,
        }
    }

    /// `seed\tbase\tnovel\thm` rows with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("seed\tbase\tnovel\thm\n");
        for m in &self.per_seed {
            out.push_str(&format!("{}\t{:.4}\t{:.4}\t{:.4}\n", m.seed, m.base, m.novel, m.hm));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>6}  {:>12}  {:>12}  {:>12}\n", "seed", "base", "novel", "hm");
        for m in &self.per_seed {
            out.push_str(&format!(
                "{:>6}  {:>12.2}  {:>12.2}  {:>12.2}\n",
                m.seed, m.base, m.novel, m.hm
            ));
        }
        let pm = |s: Summary| format!("{:.2}±{:.2}", s.mean, s.std);
        out.push_str(&format!(
            "{:>6}  {:>12}  {:>12}  {:>12}\n",
            "mean",
            pm(self.base),
            pm(self.novel),
            pm(self.hm)
        ));
        for (seed, err) in &self.failures {
            out.push_str(&format!("seed {seed} failed: {err}\n"));
        }
        out
    }
}
