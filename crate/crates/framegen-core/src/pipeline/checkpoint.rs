//! The VFCK checkpoint container.
//!
//! Layout (integers little-endian): magic "VFCK" (4 bytes), u32 version = 1,
//! u32 section count, then each section as u32 name length, UTF-8 name,
//! u64 payload length, payload. Exactly five sections are written, in this
//! order: `config` (UTF-8 key=value lines), `schedule` (u32 T, then T+1
//! alpha and T+1 sigma values as f64), and the parameter families
//! `autoencoder`, `denoiser`, `condencoder` (u32 entry count, then per
//! entry: u32 name length, name, u32 rank, u32 dims, f32 values). Readers
//! accept the sections in any order. Save and load restore every parameter
//! bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, FormatErrorKind, Result};
use crate::nn::ParamStore;

use super::ModelConfig;

const MAGIC: &[u8; 4] = b"VFCK";
const VERSION: u32 = 1;
/// Parameter family prefix per section, in write order.
const FAMILIES: [(&str, &str); 3] = [
    ("autoencoder", "ae."),
    ("denoiser", "den."),
    ("condencoder", "cond."),
];
/// Refuse absurd sizes before allocating.
const MAX_ELEMS: u64 = 1 << 31;

/// A complete model snapshot: config, noise schedule tables, and all
/// parameters at 32-bit precision.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamStore<f32>,
}

fn config_lines(m: &ModelConfig) -> String {
    format!(
        "latent_channels={}\nae_width={}\nden_w1={}\nden_w2={}\ngroups={}\nheads={}\n\
         temb_dim={}\nctx_dim={}\nstack_channels={}\ntemporal_channels={}\nr_spatial={}\n\
         r_temporal={}\nfusion_heads={}\nfusion_d_k={}\ntemporal={}\nxframe={}\n\
         timesteps={}\nlatent_scale={}\n",
        m.latent_channels,
        m.ae_width,
        m.den.widths[0],
        m.den.widths[1],
        m.den.groups,
        m.den.heads,
        m.den.temb_dim,
        m.den.ctx_dim,
        m.cond.stack_channels,
        m.cond.temporal_channels,
        m.cond.r_spatial,
        m.cond.r_temporal,
        m.cond.fusion_heads,
        m.cond.fusion_d_k,
        m.cond.temporal,
        m.cond.xframe,
        m.timesteps,
        m.latent_scale,
    )
}

fn parse_config(path: &Path, text: &str) -> Result<ModelConfig> {
    let corrupt = |msg: String| Error::format(path, FormatErrorKind::Corrupt(msg));
    let mut seen = BTreeMap::<String, String>::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("config line {}: no '='", i + 1)))?;
        if seen.insert(k.to_string(), v.to_string()).is_some() {
            return Err(corrupt(format!("config line {}: duplicate key {k}", i + 1)));
        }
    }
    let mut take = |key: &str| {
        seen.remove(key)
            .ok_or_else(|| corrupt(format!("config missing key {key}")))
    };
    let usize_of = |key: &str, v: String| {
        v.parse::<usize>()
            .map_err(|_| corrupt(format!("config key {key}: bad integer {v:?}")))
    };
    let bool_of = |key: &str, v: String| match v.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(corrupt(format!("config key {key}: bad bool {v:?}"))),
    };

    let mut m = ModelConfig::default();
    m.latent_channels = usize_of("latent_channels", take("latent_channels")?)?;
    m.ae_width = usize_of("ae_width", take("ae_width")?)?;
    m.den.latent_channels = m.latent_channels;
    m.den.widths = [
        usize_of("den_w1", take("den_w1")?)?,
        usize_of("den_w2", take("den_w2")?)?,
    ];
    m.den.groups = usize_of("groups", take("groups")?)?;
    m.den.heads = usize_of("heads", take("heads")?)?;
    m.den.temb_dim = usize_of("temb_dim", take("temb_dim")?)?;
    m.den.ctx_dim = usize_of("ctx_dim", take("ctx_dim")?)?;
    m.cond.stack_channels = usize_of("stack_channels", take("stack_channels")?)?;
    m.cond.temporal_channels = usize_of("temporal_channels", take("temporal_channels")?)?;
    m.cond.r_spatial = usize_of("r_spatial", take("r_spatial")?)?;
    m.cond.r_temporal = usize_of("r_temporal", take("r_temporal")?)?;
    m.cond.fusion_heads = usize_of("fusion_heads", take("fusion_heads")?)?;
    m.cond.fusion_d_k = usize_of("fusion_d_k", take("fusion_d_k")?)?;
    m.cond.temporal = bool_of("temporal", take("temporal")?)?;
    m.cond.xframe = bool_of("xframe", take("xframe")?)?;
    m.timesteps = usize_of("timesteps", take("timesteps")?)?;
    let scale = take("latent_scale")?;
    m.latent_scale = scale
        .parse::<f64>()
        .map_err(|_| corrupt(format!("config key latent_scale: bad float {scale:?}")))?;
    if let Some(k) = seen.keys().next() {
        return Err(corrupt(format!("config has unknown key {k}")));
    }
    m.validate()
        .map_err(|e| corrupt(format!("config fails validation: {e}")))?;
    Ok(m)
}

fn schedule_payload(s: &NoiseSchedule) -> Vec<u8> {
    let t = s.timesteps() as u32;
    let mut buf = Vec::with_capacity(4 + 16 * (t as usize + 1));
    buf.extend_from_slice(&t.to_le_bytes());
    for &a in s.alpha_table() {
        buf.extend_from_slice(&a.to_le_bytes());
    }
    for &sg in s.sigma_table() {
        buf.extend_from_slice(&sg.to_le_bytes());
    }
    buf
}

fn params_payload(params: &ParamStore<f32>, prefix: &str) -> Vec<u8> {
    let entries: Vec<_> = params
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, arr) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Write a checkpoint. Every parameter name must carry one of the family
/// prefixes `ae.`, `den.`, `cond.`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.model.validate()?;
    if ckpt.schedule.timesteps() != ckpt.model.timesteps {
        return Err(Error::Invalid(format!(
            "schedule has T={} but the config says {}",
            ckpt.schedule.timesteps(),
            ckpt.model.timesteps
        )));
    }
    for name in ckpt.params.names() {
        if !FAMILIES.iter().any(|(_, p)| name.starts_with(p)) {
            return Err(Error::Invalid(format!(
                "parameter {name} belongs to no checkpoint family (ae./den./cond.)"
            )));
        }
    }

    let mut sections: Vec<(&str, Vec<u8>)> = vec![
        ("config", config_lines(&ckpt.model).into_bytes()),
        ("schedule", schedule_payload(&ckpt.schedule)),
    ];
    for (section, prefix) in FAMILIES {
        sections.push((section, params_payload(&ckpt.params, prefix)));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, payload) in &sections {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        buf.extend_from_slice(payload);
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Byte cursor whose reads fail with a truncation error naming the offset.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                FormatErrorKind::Truncated {
                    expected: (self.pos + n) as u64,
                    found: self.bytes.len() as u64,
                },
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| {
            Error::format(
                self.path,
                FormatErrorKind::Corrupt("non-UTF-8 name".into()),
            )
        })
    }
}

fn parse_schedule(path: &Path, payload: &[u8]) -> Result<NoiseSchedule> {
    let mut r = Reader { path, bytes: payload, pos: 0 };
    let t = r.u32()? as usize;
    if t as u64 > MAX_ELEMS {
        return Err(Error::format(
            path,
            FormatErrorKind::Corrupt(format!("implausible schedule length {t}")),
        ));
    }
    let table = |r: &mut Reader| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(t + 1);
        for _ in 0..=t {
            v.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        Ok(v)
    };
    let alpha = table(&mut r)?;
    let sigma = table(&mut r)?;
    if r.pos != payload.len() {
        return Err(Error::format(
            path,
            FormatErrorKind::Corrupt("trailing bytes in schedule section".into()),
        ));
    }
    NoiseSchedule::from_tables(alpha, sigma)
        .map_err(|e| Error::format(path, FormatErrorKind::Corrupt(format!("schedule: {e}"))))
}

fn parse_params(
    path: &Path,
    payload: &[u8],
    prefix: &str,
    out: &mut ParamStore<f32>,
) -> Result<()> {
    let corrupt = |msg: String| Error::format(path, FormatErrorKind::Corrupt(msg));
    let mut r = Reader { path, bytes: payload, pos: 0 };
    let count = r.u32()?;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        if !name.starts_with(prefix) {
            return Err(corrupt(format!(
                "parameter {name} in the wrong section (expected prefix {prefix})"
            )));
        }
        if out.contains(&name) {
            return Err(corrupt(format!("duplicate parameter {name}")));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("parameter {name}: implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            elems = elems.saturating_mul(d as u64);
            dims.push(d);
        }
        if elems > MAX_ELEMS {
            return Err(corrupt(format!("parameter {name}: implausible size {elems}")));
        }
        let mut values = Vec::with_capacity(elems as usize);
        for chunk in r.take(elems as usize * 4)?.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| corrupt(format!("parameter {name}: {e}")))?;
        out.insert(name, arr);
    }
    if r.pos != payload.len() {
        return Err(corrupt(format!("trailing bytes after {prefix} parameters")));
    }
    Ok(())
}

/// Read a checkpoint, restoring parameters and schedule tables bitwise.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::format(
            path,
            FormatErrorKind::Truncated { expected: 12, found: bytes.len() as u64 },
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, FormatErrorKind::BadMagic));
    }
    let mut r = Reader { path, bytes: &bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, FormatErrorKind::UnsupportedVersion(version)));
    }
    let count = r.u32()?;
    let mut sections = BTreeMap::<String, &[u8]>::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > 64 {
            return Err(Error::format(
                path,
                FormatErrorKind::Corrupt(format!("implausible section name length {name_len}")),
            ));
        }
        let name = r.string(name_len)?;
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        if sections.insert(name.clone(), payload).is_some() {
            return Err(Error::format(
                path,
                FormatErrorKind::Corrupt(format!("duplicate section {name}")),
            ));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            FormatErrorKind::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)),
        ));
    }
    let section = |name: &str| {
        sections.get(name).copied().ok_or_else(|| {
            Error::format(path, FormatErrorKind::Corrupt(format!("missing section {name}")))
        })
    };
    for name in sections.keys() {
        if name != "config"
            && name != "schedule"
            && !FAMILIES.iter().any(|(s, _)| s == name)
        {
            return Err(Error::format(
                path,
                FormatErrorKind::Corrupt(format!("unknown section {name}")),
            ));
        }
    }

    let model = parse_config(path, &String::from_utf8_lossy(section("config")?))?;
    let schedule = parse_schedule(path, section("schedule")?)?;
    if schedule.timesteps() != model.timesteps {
        return Err(Error::format(
            path,
            FormatErrorKind::Corrupt(format!(
                "schedule T={} disagrees with config T={}",
                schedule.timesteps(),
                model.timesteps
            )),
        ));
    }
    let mut params = ParamStore::<f32>::new();
    for (section_name, prefix) in FAMILIES {
        parse_params(path, section(section_name)?, prefix, &mut params)?;
    }
    Ok(Checkpoint { model, schedule, params })
}
