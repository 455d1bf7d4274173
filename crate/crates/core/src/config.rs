//! Flat `key = value` configuration files. Every setting has a default and
//! every effective value is echoed back into reports and model files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::field::{JointConfig, OnlineConfig, Regime};
use crate::fit::RansacParams;
use crate::geom::Vec3;
use crate::pim::{EncoderKind, InversionGrid, PimConfig, PretrainConfig};
use crate::sim::SimConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", no + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", no + 1)));
            }
        }
        Ok(Self { map })
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        Self { map }
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.map
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Overwrites `slot` when `key` is present.
    pub fn read<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.map.get(key) {
            *slot = v.parse().map_err(|e| Error::Config(format!("{key} = {v}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Errors on any key not in `known`.
    pub fn check_known(&self, known: &KeyValues) -> Result<()> {
        match self.map.keys().find(|k| !known.map.contains_key(*k)) {
            Some(k) => Err(Error::Config(format!("unknown setting {k}"))),
            None => Ok(()),
        }
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }
}

fn vec3_text(v: Vec3) -> String {
    format!("{},{},{}", v.x, v.y, v.z)
}

fn parse_vec3(key: &str, s: &str) -> Result<Vec3> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("{key} = {s}: {e}")))?;
    match parts[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(Error::Config(format!("{key} = {s}: expected x,y,z"))),
    }
}

impl Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EncoderKind::Pooling => write!(f, "pooling"),
            EncoderKind::Sorted { group } => write!(f, "sorted:{group}"),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "pooling" {
            return Ok(EncoderKind::Pooling);
        }
        if let Some(g) = s.strip_prefix("sorted:") {
            let group = g.parse().map_err(|_| Error::Config(format!("bad group in {s:?}")))?;
            return Ok(EncoderKind::Sorted { group });
        }
        Err(Error::Config(format!("encoder {s:?} (pooling or sorted:<group>)")))
    }
}

pub fn sim_to_kv(c: &SimConfig, kv: &mut KeyValues) {
    kv.set("sim.dt", c.dt);
    kv.set("sim.ball_radius", c.ball_radius);
    kv.set("sim.frames", c.frames);
    kv.set("sim.points", c.points);
    kv.set("sim.noise_sigma", c.noise_sigma);
    kv.set("sim.speed_min", c.speed_min);
    kv.set("sim.speed_max", c.speed_max);
    kv.set("sim.position_box", c.position_box);
    kv.set("sim.camera", vec3_text(c.camera));
    kv.set("sim.gravity", c.gravity);
    kv.set("sim.patch_extent", c.patch_extent);
    kv.set("sim.horizon", c.horizon);
    kv.set("sim.max_retries", c.max_retries);
}

pub fn sim_from_kv(kv: &KeyValues) -> Result<SimConfig> {
    let mut c = SimConfig::default();
    kv.read("sim.dt", &mut c.dt)?;
    kv.read("sim.ball_radius", &mut c.ball_radius)?;
    kv.read("sim.frames", &mut c.frames)?;
    kv.read("sim.points", &mut c.points)?;
    kv.read("sim.noise_sigma", &mut c.noise_sigma)?;
    kv.read("sim.speed_min", &mut c.speed_min)?;
    kv.read("sim.speed_max", &mut c.speed_max)?;
    kv.read("sim.position_box", &mut c.position_box)?;
    if let Some(s) = kv.get_str("sim.camera") {
        c.camera = parse_vec3("sim.camera", s)?;
    }
    kv.read("sim.gravity", &mut c.gravity)?;
    kv.read("sim.patch_extent", &mut c.patch_extent)?;
    kv.read("sim.horizon", &mut c.horizon)?;
    kv.read("sim.max_retries", &mut c.max_retries)?;
    c.validate()?;
    Ok(c)
}

pub fn pim_to_kv(c: &PimConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.set("pim.frames", c.frames);
    kv.set("pim.points", c.points);
    kv.set("pim.embed", c.embed);
    kv.set("pim.encoder", c.encoder);
    kv.set("pim.point_hidden", c.point_hidden);
    kv.set("pim.point_out", c.point_out);
    kv.set("pim.frame_out", c.frame_out);
    kv.set("pim.trunk_hidden", c.trunk_hidden);
    kv.set("pim.param_hidden", c.param_hidden);
    kv.set("pim.param_embed", c.param_embed);
    kv.set("pim.engine_hidden", c.engine_hidden);
    kv.set("pim.recon_hidden", c.recon_hidden);
    kv.set("pim.input_scale", c.input_scale);
    kv.set("pim.seed", c.seed);
    kv
}

pub fn pim_from_kv(kv: &KeyValues) -> Result<PimConfig> {
    let mut c = PimConfig::default();
    kv.read("pim.frames", &mut c.frames)?;
    kv.read("pim.points", &mut c.points)?;
    kv.read("pim.embed", &mut c.embed)?;
    kv.read("pim.encoder", &mut c.encoder)?;
    kv.read("pim.point_hidden", &mut c.point_hidden)?;
    kv.read("pim.point_out", &mut c.point_out)?;
    kv.read("pim.frame_out", &mut c.frame_out)?;
    kv.read("pim.trunk_hidden", &mut c.trunk_hidden)?;
    kv.read("pim.param_hidden", &mut c.param_hidden)?;
    kv.read("pim.param_embed", &mut c.param_embed)?;
    kv.read("pim.engine_hidden", &mut c.engine_hidden)?;
    kv.read("pim.recon_hidden", &mut c.recon_hidden)?;
    kv.read("pim.input_scale", &mut c.input_scale)?;
    kv.read("pim.seed", &mut c.seed)?;
    c.validate()?;
    Ok(c)
}

impl Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Frozen => "frozen",
            Regime::All => "all",
            Regime::CoreOnly => "core-only",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Regime::Frozen),
            "all" => Ok(Regime::All),
            "core-only" => Ok(Regime::CoreOnly),
            _ => Err(Error::Config(format!("regime {s:?} (frozen, all or core-only)"))),
        }
    }
}

/// Every tunable setting of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub sim: SimConfig,
    pub pim: PimConfig,
    pub pretrain: PretrainConfig,
    pub joint: JointConfig,
    pub online: OnlineConfig,
    pub ransac: RansacParams,
    pub grid: InversionGrid,
    pub db_count: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            pim: PimConfig::default(),
            pretrain: PretrainConfig::default(),
            joint: JointConfig::default(),
            online: OnlineConfig::default(),
            ransac: RansacParams::default(),
            grid: InversionGrid::default(),
            db_count: 10_000,
        }
    }
}

impl Settings {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = pim_to_kv(&self.pim);
        sim_to_kv(&self.sim, &mut kv);
        let p = &self.pretrain;
        kv.set("pretrain.batch", p.batch);
        kv.set("pretrain.lr", p.lr);
        kv.set("pretrain.weight_decay", p.weight_decay);
        kv.set("pretrain.lr_step", p.lr_step);
        kv.set("pretrain.iterations", p.iterations);
        kv.set("pretrain.margin", p.margin);
        kv.set("pretrain.seed", p.seed);
        let j = &self.joint;
        kv.set("joint.lr", j.lr);
        kv.set("joint.field_lr", j.field_lr);
        kv.set("joint.batch", j.batch);
        kv.set("joint.weight_decay", j.weight_decay);
        kv.set("joint.lr_step", j.lr_step);
        kv.set("joint.iterations", j.iterations);
        kv.set("joint.lambda", j.lambda);
        kv.set("joint.regime", j.regime);
        kv.set("joint.seed", j.seed);
        let o = &self.online;
        kv.set("online.lr", o.lr);
        kv.set("online.tolerance", o.tolerance);
        kv.set("online.window", o.window);
        kv.set("online.max_steps", o.max_steps);
        let r = &self.ransac;
        kv.set("ransac.iterations", r.iterations);
        kv.set("ransac.inlier_tol", r.inlier_tol);
        kv.set("ransac.min_inlier_fraction", r.min_inlier_fraction);
        kv.set("ransac.seed", r.seed);
        kv.set("invert.cor_step", self.grid.cor_step);
        kv.set("invert.normals", self.grid.normals);
        kv.set("invert.refine", self.grid.refine);
        kv.set("db.count", self.db_count);
        kv
    }

    /// Defaults overridden by `kv`; unknown keys are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(&Settings::default().to_kv())?;
        let mut s = Settings { sim: sim_from_kv(kv)?, pim: pim_from_kv(kv)?, ..Settings::default() };
        let p = &mut s.pretrain;
        kv.read("pretrain.batch", &mut p.batch)?;
        kv.read("pretrain.lr", &mut p.lr)?;
        kv.read("pretrain.weight_decay", &mut p.weight_decay)?;
        kv.read("pretrain.lr_step", &mut p.lr_step)?;
        kv.read("pretrain.iterations", &mut p.iterations)?;
        kv.read("pretrain.margin", &mut p.margin)?;
        kv.read("pretrain.seed", &mut p.seed)?;
        let j = &mut s.joint;
        kv.read("joint.lr", &mut j.lr)?;
        kv.read("joint.field_lr", &mut j.field_lr)?;
        kv.read("joint.batch", &mut j.batch)?;
        kv.read("joint.weight_decay", &mut j.weight_decay)?;
        kv.read("joint.lr_step", &mut j.lr_step)?;
        kv.read("joint.iterations", &mut j.iterations)?;
        kv.read("joint.lambda", &mut j.lambda)?;
        kv.read("joint.regime", &mut j.regime)?;
        kv.read("joint.seed", &mut j.seed)?;
        if !(j.lambda >= 0.0) {
            return Err(Error::Config("joint.lambda must be non-negative".into()));
        }
        let o = &mut s.online;
        kv.read("online.lr", &mut o.lr)?;
        kv.read("online.tolerance", &mut o.tolerance)?;
        kv.read("online.window", &mut o.window)?;
        kv.read("online.max_steps", &mut o.max_steps)?;
        let r = &mut s.ransac;
        kv.read("ransac.iterations", &mut r.iterations)?;
        kv.read("ransac.inlier_tol", &mut r.inlier_tol)?;
        kv.read("ransac.min_inlier_fraction", &mut r.min_inlier_fraction)?;
        kv.read("ransac.seed", &mut r.seed)?;
        kv.read("invert.cor_step", &mut s.grid.cor_step)?;
        kv.read("invert.normals", &mut s.grid.normals)?;
        kv.read("invert.refine", &mut s.grid.refine)?;
        kv.read("db.count", &mut s.db_count)?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let s = Settings::default();
        let text = s.to_kv().to_text();
        assert_eq!(Settings::parse(&text).unwrap(), s);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let s = Settings::parse("# desk run\npretrain.iterations = 100\nsim.camera = 1,2,3\npim.encoder = sorted:4\n").unwrap();
        assert_eq!(s.pretrain.iterations, 100);
        assert_eq!(s.sim.camera, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(s.pim.encoder, EncoderKind::Sorted { group: 4 });
        assert!(Settings::parse("pretrain.iters = 3").is_err());
        assert!(Settings::parse("sim.dt = fast").is_err());
        assert!(Settings::parse("sim.dt = 0.1\nsim.dt = 0.2").is_err());
        assert!(Settings::parse("joint.regime = some").is_err());
    }
}
