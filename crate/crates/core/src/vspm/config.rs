use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};

/// Source of the deterministic low-frequency estimate `m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeterministicPath {
    Bicubic,
    /// `m = 0`; the module has to carry the whole reconstruction.
    None,
    /// Precomputed SR image read from disk.
    External(PathBuf),
}

impl DeterministicPath {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(Self::Bicubic),
            "none" => Ok(Self::None),
            _ => match s.strip_prefix("external:") {
                Some(p) if !p.is_empty() => Ok(Self::External(PathBuf::from(p))),
                _ => Err(Error::Config(format!(
                    "deterministic_path must be bicubic, none or external:<file>, got {s:?}"
                ))),
            },
        }
    }

    pub fn as_string(&self) -> String {
        match self {
            Self::Bicubic => "bicubic".into(),
            Self::None => "none".into(),
            Self::External(p) => format!("external:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VSpMConfig {
    pub scale: usize,
    /// Number of basis atoms `C`.
    pub num_basis: usize,
    /// Residual blocks `L` in the basis feature extractor.
    pub blocks: usize,
    pub width: usize,
    pub coeff_depth: usize,
    pub stochastic_z: bool,
    pub stochastic_omega: bool,
    pub deterministic_path: DeterministicPath,
    pub cem_iters: usize,
    pub sigma_floor: f64,
}

impl Default for VSpMConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            num_basis: 256,
            blocks: 4,
            width: 32,
            coeff_depth: 3,
            stochastic_z: false,
            stochastic_omega: true,
            deterministic_path: DeterministicPath::Bicubic,
            cem_iters: 5,
            sigma_floor: 1e-4,
        }
    }
}

pub(crate) const CONFIG_KEYS: [&str; 10] = [
    "scale",
    "num_basis",
    "blocks",
    "width",
    "coeff_depth",
    "stochastic_z",
    "stochastic_omega",
    "deterministic_path",
    "cem_iters",
    "sigma_floor",
];

impl VSpMConfig {
    /// Small model used for CPU-only training runs.
    pub fn desk_scale() -> Self {
        Self {
            num_basis: 64,
            blocks: 4,
            width: 16,
            cem_iters: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if ![2, 4, 8].contains(&self.scale) {
            errs.push(format!("scale must be 2, 4 or 8, got {}", self.scale));
        }
        if self.num_basis == 0 {
            errs.push("num_basis must be at least 1".to_string());
        }
        if self.blocks == 0 {
            errs.push("blocks must be at least 1".to_string());
        }
        if self.width == 0 {
            errs.push("width must be at least 1".to_string());
        }
        if self.coeff_depth == 0 {
            errs.push("coeff_depth must be at least 1".to_string());
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            errs.push(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Ordered `key = value` form used by checkpoints and manifests.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let vals = [
            self.scale.to_string(),
            self.num_basis.to_string(),
            self.blocks.to_string(),
            self.width.to_string(),
            self.coeff_depth.to_string(),
            self.stochastic_z.to_string(),
            self.stochastic_omega.to_string(),
            self.deterministic_path.as_string(),
            self.cem_iters.to_string(),
            format!("{:?}", self.sigma_floor),
        ];
        CONFIG_KEYS
            .iter()
            .zip(vals)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut errs = Vec::new();
        for k in kv.keys() {
            if !CONFIG_KEYS.contains(&k.as_str()) {
                errs.push(format!("unknown model key {k:?}"));
            }
        }
        let mut cfg = VSpMConfig::default();
        let get = |k: &str, errs: &mut Vec<String>| -> Option<String> {
            let v = kv.get(k).cloned();
            if v.is_none() {
                errs.push(format!("missing model key {k:?}"));
            }
            v
        };
        macro_rules! parse_field {
            ($key:literal, $field:ident) => {
                if let Some(v) = get($key, &mut errs) {
                    match v.parse() {
                        Ok(p) => cfg.$field = p,
                        Err(_) => errs.push(format!("{}: cannot parse {v:?}", $key)),
                    }
                }
            };
        }
        parse_field!("scale", scale);
        parse_field!("num_basis", num_basis);
        parse_field!("blocks", blocks);
        parse_field!("width", width);
        parse_field!("coeff_depth", coeff_depth);
        parse_field!("stochastic_z", stochastic_z);
        parse_field!("stochastic_omega", stochastic_omega);
        parse_field!("cem_iters", cem_iters);
        parse_field!("sigma_floor", sigma_floor);
        if let Some(v) = get("deterministic_path", &mut errs) {
            match DeterministicPath::parse(&v) {
                Ok(p) => cfg.deterministic_path = p,
                Err(e) => errs.push(e.to_string()),
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names and shapes of all learnable tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (w, c, s) = (self.width, self.num_basis, self.scale);
        let mut out = vec![
            ("basis.head.weight".to_string(), vec![w, 1, 3, 3]),
            ("basis.head.bias".to_string(), vec![w]),
        ];
        for i in 0..self.blocks {
            for conv in ["conv1", "conv2"] {
                out.push((format!("basis.block{i}.{conv}.weight"), vec![w, w, 3, 3]));
                out.push((format!("basis.block{i}.{conv}.bias"), vec![w]));
            }
        }
        out.push(("basis.up.weight".to_string(), vec![w, c, s, s]));
        if self.stochastic_z {
            out.push(("basis.noise_scale".to_string(), vec![1]));
        }
        for i in 0..self.coeff_depth {
            let cin = if i == 0 { 1 } else { w };
            out.push((format!("coeff.conv{i}.weight"), vec![w, cin, 3, 3]));
            out.push((format!("coeff.conv{i}.bias"), vec![w]));
            out.push((format!("coeff.norm{i}.gain"), vec![w]));
            out.push((format!("coeff.norm{i}.offset"), vec![w]));
        }
        out.push(("coeff.mu.weight".to_string(), vec![c, w, 1, 1]));
        out.push(("coeff.mu.bias".to_string(), vec![c]));
        out.push(("coeff.sigma.weight".to_string(), vec![c, w, 1, 1]));
        out.push(("coeff.sigma.bias".to_string(), vec![c]));
        out
    }
}
