use std::collections::BTreeMap;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frozen_lake::{GridMethod, GridTrainConfig};
use crate::losses::{LossConfig, Normalize, Propagation, Reduction};
use crate::toy_lm::{CorpusSpec, Task, ToyConfig, ToyMethod};

/// `(section, key, default)` in echo order.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("run", "seed", "1"),
    ("run", "seeds", "5"),
    ("loss", "lambda", "0.2"),
    ("loss", "alpha", "0.95"),
    ("loss", "propagation", "eq20_suffix_sum"),
    ("loss", "normalize", "per_token"),
    ("loss", "reduction", "sum"),
    ("loss", "dpo_beta", "0.1"),
    ("loss", "orpo_beta", "0.25"),
    ("loss", "orpo_mix", "1"),
    ("frozenlake", "map", "shipped"),
    ("frozenlake", "methods", "sft,ift,dpo_offline,dpo_online,orpo"),
    ("frozenlake", "discount", "0.9"),
    ("frozenlake", "hidden", "16"),
    ("frozenlake", "epochs", "50"),
    ("frozenlake", "lr", "0.001"),
    ("frozenlake", "dpo_warmup", "50"),
    ("frozenlake", "rollouts", "10"),
    ("frozenlake", "epsilon", "0.1"),
    ("frozenlake", "truncation", "32"),
    ("toylm", "task", "modular_chain"),
    ("toylm", "methods", "sft,ift"),
    ("toylm", "vocab_size", "22"),
    ("toylm", "min_len", "8"),
    ("toylm", "max_len", "8"),
    ("toylm", "train_size", "300"),
    ("toylm", "eval_size", "50"),
    ("toylm", "dim", "32"),
    ("toylm", "mlp_hidden", "64"),
    ("toylm", "epochs", "60"),
    ("toylm", "batch_size", "16"),
    ("toylm", "lr", "0.01"),
    ("toylm", "eval_every", "10"),
];

/// A fully defaulted, validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    values: BTreeMap<(String, String), String>,
    pub seed: u64,
    pub seeds: usize,
    pub loss: LossConfig,
    pub map: String,
    pub discount: f64,
    pub grid: GridTrainConfig,
    pub grid_methods: Vec<GridMethod>,
    pub toy: ToyConfig,
    pub toy_methods: Vec<ToyMethod>,
}

impl ResolvedConfig {
    /// Seeds `seed, seed + 1, ...`.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    /// Every key in schema order, as parseable config text.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for &(section, key, _) in SCHEMA {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {}\n", self.get(section, key).expect("schema key")));
        }
        out
    }

    /// Hex SHA-256 of [`echo`](Self::echo).
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.echo().as_bytes()))
    }
}

fn sections() -> Vec<&'static str> {
    let mut s: Vec<&str> = SCHEMA.iter().map(|e| e.0).collect();
    s.dedup();
    s
}

/// Finds the section for `key`. A bare key must be unique unless `prefer`
/// names one of its sections.
fn locate(section: Option<&str>, key: &str, prefer: Option<&str>) -> std::result::Result<(String, String), String> {
    if let Some(s) = section {
        return if SCHEMA.iter().any(|e| e.0 == s && e.1 == key) {
            Ok((s.into(), key.into()))
        } else if sections().contains(&s) {
            Err(format!("unknown key {s}.{key}"))
        } else {
            Err(format!("unknown section [{s}]"))
        };
    }
    let homes: Vec<&str> = SCHEMA.iter().filter(|e| e.1 == key).map(|e| e.0).collect();
    match homes.as_slice() {
        [] => Err(format!("unknown key {key}")),
        [one] => Ok(((*one).into(), key.into())),
        many => match prefer.filter(|p| many.contains(p)) {
            Some(p) => Ok((p.into(), key.into())),
            None => Err(format!("ambiguous key {key} (in {})", many.join(", "))),
        },
    }
}

/// Parses `key=value` config text with `[section]` headers. `#` starts a
/// comment line. Keys outside a section are resolved like overrides.
/// Overrides are `key=value` or `section.key=value` and win over the file.
/// `prefer` settles bare keys that exist in several sections.
pub fn load_config(text: &str, overrides: &[String], prefer: Option<&str>) -> Result<ResolvedConfig> {
    let mut values: BTreeMap<(String, String), String> =
        SCHEMA.iter().map(|&(s, k, v)| ((s.to_string(), k.to_string()), v.to_string())).collect();
    let mut bad = Vec::new();
    let mut section: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !sections().contains(&name) {
                bad.push(format!("line {}: unknown section [{name}]", n + 1));
            }
            section = Some(name.to_string());
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => match locate(section.as_deref(), k.trim(), prefer) {
                Ok(slot) => {
                    values.insert(slot, v.trim().to_string());
                }
                Err(e) => bad.push(format!("line {}: {e}", n + 1)),
            },
            None => bad.push(format!("line {}: expected key = value", n + 1)),
        }
    }
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) => {
                let k = k.trim();
                let (s, key) = match k.split_once('.') {
                    Some((s, key)) => (Some(s), key),
                    None => (None, k),
                };
                match locate(s, key, prefer) {
                    Ok(slot) => {
                        values.insert(slot, v.trim().to_string());
                    }
                    Err(e) => bad.push(format!("override {o:?}: {e}")),
                }
            }
            None => bad.push(format!("override {o:?}: expected key=value")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad.join("; ")));
    }
    resolve(values)
}

struct Reader<'a> {
    values: &'a BTreeMap<(String, String), String>,
    bad: Vec<String>,
}

impl Reader<'_> {
    fn raw(&self, s: &str, k: &str) -> &str {
        &self.values[&(s.to_string(), k.to_string())]
    }

    fn parse<T: FromStr>(&mut self, s: &str, k: &str, fallback: T) -> T {
        match self.raw(s, k).parse() {
            Ok(v) => v,
            Err(_) => {
                self.bad.push(format!("{s}.{k}={:?} does not parse", self.raw(s, k)));
                fallback
            }
        }
    }

    fn f64_in(&mut self, s: &str, k: &str, ok: impl Fn(f64) -> bool, range: &str) -> f64 {
        let v = self.parse(s, k, f64::NAN);
        if !v.is_nan() && !ok(v) {
            self.bad.push(format!("{s}.{k}={v} not in {range}"));
        }
        v
    }

    fn positive(&mut self, s: &str, k: &str) -> usize {
        let v = self.parse(s, k, 1usize);
        if v == 0 {
            self.bad.push(format!("{s}.{k} must be positive"));
        }
        v
    }

    fn choice<T>(&mut self, s: &str, k: &str, options: &[(&str, T)]) -> Option<T>
    where
        T: Copy,
    {
        let raw = self.raw(s, k);
        match options.iter().find(|o| o.0 == raw) {
            Some(o) => Some(o.1),
            None => {
                let names: Vec<&str> = options.iter().map(|o| o.0).collect();
                self.bad.push(format!("{s}.{k}={raw:?} not one of {}", names.join(", ")));
                None
            }
        }
    }

    fn list<T: FromStr>(&mut self, s: &str, k: &str) -> Vec<T> {
        let raw = self.raw(s, k).to_string();
        let mut out = Vec::new();
        for item in raw.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            match item.parse() {
                Ok(v) => out.push(v),
                Err(_) => self.bad.push(format!("{s}.{k}: unknown entry {item:?}")),
            }
        }
        if raw.trim().is_empty() {
            self.bad.push(format!("{s}.{k} is empty"));
        }
        out
    }
}

fn resolve(values: BTreeMap<(String, String), String>) -> Result<ResolvedConfig> {
    let mut r = Reader { values: &values, bad: Vec::new() };
    let seed = r.parse("run", "seed", 1u64);
    let seeds = r.positive("run", "seeds");

    let unit = |x: f64| (0.0..=1.0).contains(&x);
    let positive = |x: f64| x > 0.0 && x.is_finite();
    let loss = LossConfig {
        lambda: r.f64_in("loss", "lambda", unit, "[0, 1]"),
        decay: r.f64_in("loss", "alpha", |x| x > 0.0 && x <= 1.0, "(0, 1]"),
        propagation: r
            .choice(
                "loss",
                "propagation",
                &[
                    ("eq20_suffix_sum", Propagation::Eq20SuffixSum),
                    ("alg1_scaled", Propagation::Alg1Scaled),
                    ("off", Propagation::Off),
                ],
            )
            .unwrap_or(Propagation::Eq20SuffixSum),
        normalize: r
            .choice(
                "loss",
                "normalize",
                &[
                    ("per_token", Normalize::PerToken),
                    ("per_weight_sum", Normalize::PerWeightSum),
                    ("none", Normalize::None),
                ],
            )
            .unwrap_or(Normalize::PerToken),
        reduction: r
            .choice("loss", "reduction", &[("sum", Reduction::Sum), ("dot_experimental", Reduction::DotExperimental)])
            .unwrap_or(Reduction::Sum),
        beta: r.f64_in("loss", "dpo_beta", positive, "(0, inf)"),
        orpo_mix: r.f64_in("loss", "orpo_mix", |x| x >= 0.0 && x.is_finite(), "[0, inf)"),
    };
    let orpo_beta = r.f64_in("loss", "orpo_beta", positive, "(0, inf)");

    let map = r.raw("frozenlake", "map").to_string();
    let discount = r.f64_in("frozenlake", "discount", |x| x > 0.0 && x < 1.0, "(0, 1)");
    let grid = GridTrainConfig {
        hidden: r.positive("frozenlake", "hidden"),
        epochs: r.positive("frozenlake", "epochs"),
        lr: r.f64_in("frozenlake", "lr", positive, "(0, inf)"),
        loss,
        dpo_beta: loss.beta,
        orpo_beta,
        dpo_warmup: r.parse("frozenlake", "dpo_warmup", 0),
        rollouts: r.positive("frozenlake", "rollouts"),
        epsilon: r.f64_in("frozenlake", "epsilon", unit, "[0, 1]"),
        truncation: r.positive("frozenlake", "truncation"),
    };
    let grid_methods = r.list("frozenlake", "methods");

    let task: Task = r.parse("toylm", "task", Task::ModularChain);
    let toy = ToyConfig {
        corpus: CorpusSpec {
            task,
            vocab_size: r.positive("toylm", "vocab_size"),
            min_len: r.positive("toylm", "min_len"),
            max_len: r.positive("toylm", "max_len"),
            train_size: r.positive("toylm", "train_size"),
            eval_size: r.positive("toylm", "eval_size"),
            seed,
        },
        dim: r.positive("toylm", "dim"),
        mlp_hidden: r.positive("toylm", "mlp_hidden"),
        epochs: r.positive("toylm", "epochs"),
        batch_size: r.positive("toylm", "batch_size"),
        lr: r.f64_in("toylm", "lr", positive, "(0, inf)"),
        loss,
        eval_every: r.positive("toylm", "eval_every"),
    };
    let toy_methods = r.list("toylm", "methods");

    if !r.bad.is_empty() {
        return Err(Error::Config(r.bad.join("; ")));
    }
    Ok(ResolvedConfig { values, seed, seeds, loss, map, discount, grid, grid_methods, toy, toy_methods })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frozen_lake::DEFAULT_DISCOUNT;

    fn no_overrides() -> Vec<String> {
        Vec::new()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = load_config("", &no_overrides(), None).unwrap();
        assert_eq!(c.loss, LossConfig::default());
        assert_eq!(c.grid, GridTrainConfig::default());
        assert_eq!(c.toy, ToyConfig::default());
        assert_eq!(c.grid_methods, GridMethod::ALL.to_vec());
        assert_eq!(c.toy_methods, ToyMethod::ALL.to_vec());
        assert_eq!(c.seed_list(), vec![1, 2, 3, 4, 5]);
        assert_eq!(c.discount, DEFAULT_DISCOUNT);
        assert_eq!(c.map, "shipped");
    }

    #[test]
    fn sft_equivalent_override() {
        let o = vec!["lambda=0.0".to_string(), "propagation=off".to_string()];
        let c = load_config("", &o, None).unwrap();
        assert_eq!(c.loss, LossConfig::sft_equivalent());
    }

    #[test]
    fn rejects_out_of_range_and_unknown() {
        let err = load_config("", &["lambda=1.5".to_string()], None).unwrap_err().to_string();
        assert!(err.contains("lambda=1.5"), "{err}");
        let text = "[loss]\nlambda = 2\nalpha = 0\ndpo_beta = -1\nfoo = 3\n[nope]\nx = 1\n";
        let err = load_config(text, &no_overrides(), None).unwrap_err().to_string();
        for needle in ["unknown key loss.foo", "unknown section [nope]"] {
            assert!(err.contains(needle), "{err}");
        }
        // parse-level problems are reported before range checks
        let err = load_config("[loss]\nlambda = 2\nalpha = 0\ndpo_beta = -1\n", &no_overrides(), None)
            .unwrap_err()
            .to_string();
        for needle in ["lambda=2", "alpha=0", "dpo_beta=-1"] {
            assert!(err.contains(needle), "{err}");
        }
    }

    #[test]
    fn ambiguous_keys_need_a_section() {
        let err = load_config("", &["epochs=3".to_string()], None).unwrap_err().to_string();
        assert!(err.contains("ambiguous key epochs"), "{err}");
        let c = load_config("", &["epochs=3".to_string()], Some("toylm")).unwrap();
        assert_eq!((c.toy.epochs, c.grid.epochs), (3, 50));
        let c = load_config("", &["frozenlake.epochs=7".to_string()], Some("toylm")).unwrap();
        assert_eq!(c.grid.epochs, 7);
    }

    #[test]
    fn file_then_overrides() {
        let text = "# comment\n[frozenlake]\nmethods = sft, ift\nhidden = 8\n";
        let c = load_config(text, &["frozenlake.hidden=4".to_string()], None).unwrap();
        assert_eq!(c.grid_methods, vec![GridMethod::Sft, GridMethod::Ift]);
        assert_eq!(c.grid.hidden, 4);
        assert!(load_config("[frozenlake]\nmethods = sft,bogus\n", &no_overrides(), None).is_err());
        assert!(load_config("[toylm]\ntask = sort\n", &no_overrides(), None).is_err());
    }

    #[test]
    fn echo_round_trips_and_hashes() {
        let c = load_config("[loss]\nlambda = 0.3\n", &["run.seed=9".to_string()], None).unwrap();
        let again = load_config(&c.echo(), &no_overrides(), None).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
        assert!(c.echo().contains("lambda = 0.3\n"));
        let d = load_config("", &no_overrides(), None).unwrap();
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }
}
