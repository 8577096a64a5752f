//! Binary checkpoints: magic `ADJD`, a `u32` version, the schedule as JSON,
//! then named little-endian `f64` arrays with explicit shapes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnet::{Activation, Dense, Denoiser, DenoiserConfig, Mlp};
use crate::schedule::NoiseSchedule;
use crate::tasks::ToyClassifier;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADJD";
pub const VERSION: u32 = 1;

const KIND_DENOISER: f64 = 0.0;
const KIND_CLASSIFIER: f64 = 1.0;
const KIND_EMBEDDING: f64 = 2.0;

/// Upper bound on any single length field, guarding against corrupt headers.
const MAX_LEN: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: Option<NoiseSchedule>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.len() != 1 {
            return Err(Error::Format(format!("{name} should be a scalar")));
        }
        Ok(t.data()[0])
    }

    fn expect_kind(&self, kind: f64, what: &str) -> Result<()> {
        if self.scalar("model.kind")? != kind {
            return Err(Error::Format(format!("checkpoint does not hold a {what}")));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let sched = serde_json::to_vec(&self.schedule).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(&(sched.len() as u32).to_le_bytes())?;
        out.write_all(&sched)?;
        out.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, t) in &self.arrays {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len = read_len(&mut input, 4)?;
        let mut sched = vec![0u8; len];
        read_exact(&mut input, &mut sched)?;
        let schedule: Option<NoiseSchedule> =
            serde_json::from_slice(&sched).map_err(|e| Error::Format(format!("schedule: {e}")))?;
        let count = read_len(&mut input, 4)?;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = read_len(&mut input, 4)?;
            let mut name = vec![0u8; n];
            read_exact(&mut input, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let ndim = read_len(&mut input, 4)?;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(read_len(&mut input, 8)?);
            }
            let total = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| (n as u64) < MAX_LEN)
                .ok_or_else(|| Error::Format(format!("array {name} is too large")))?;
            let mut bytes = vec![0u8; total * 8];
            read_exact(&mut input, &mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last array".into()));
        }
        Ok(Self { schedule, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::read(bytes.as_slice()).map_err(|e| e.context(format!("loading {}", path.display())))
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len<R: Read>(input: &mut R, width: usize) -> Result<usize> {
    let v = if width == 4 {
        u64::from(read_u32(input)?)
    } else {
        let mut b = [0u8; 8];
        read_exact(input, &mut b)?;
        u64::from_le_bytes(b)
    };
    if v >= MAX_LEN {
        return Err(Error::Format(format!("length field {v} is implausible")));
    }
    Ok(v as usize)
}

fn mlp_arrays(mlp: &Mlp, arrays: &mut Vec<(String, Tensor)>) {
    for (i, l) in mlp.layers().iter().enumerate() {
        arrays.push((format!("layer{i}.weight"), l.weight.clone()));
        arrays.push((format!("layer{i}.bias"), l.bias.clone()));
    }
    arrays.push(("config.activation".into(), Tensor::vector(vec![mlp.activation().code()])));
}

fn mlp_from(ck: &Checkpoint) -> Result<Mlp> {
    let mut layers = Vec::new();
    while let (Ok(w), Ok(b)) = (
        ck.get(&format!("layer{}.weight", layers.len())),
        ck.get(&format!("layer{}.bias", layers.len())),
    ) {
        layers.push(Dense {
            weight: w.clone(),
            bias: b.clone(),
        });
    }
    if layers.is_empty() {
        return Err(Error::Format("checkpoint has no layers".into()));
    }
    let act = Activation::from_code(ck.scalar("config.activation")?)?;
    Mlp::from_layers(layers, act).map_err(|e| Error::Format(e.to_string()))
}

pub fn denoiser_checkpoint(model: &Denoiser, sched: &NoiseSchedule) -> Checkpoint {
    let mut arrays = vec![("model.kind".to_string(), Tensor::vector(vec![KIND_DENOISER]))];
    mlp_arrays(model.mlp(), &mut arrays);
    arrays.push(("cond_table".into(), model.cond_table().clone()));
    arrays.push(("time_freqs".into(), Tensor::vector(model.time_freqs().to_vec())));
    let c = model.config();
    arrays.push(("config.freq_range".into(), Tensor::vector(vec![c.freq_min, c.freq_max])));
    Checkpoint {
        schedule: Some(*sched),
        arrays,
    }
}

pub fn denoiser_from(ck: &Checkpoint) -> Result<(Denoiser, NoiseSchedule)> {
    ck.expect_kind(KIND_DENOISER, "denoiser")?;
    let sched = ck
        .schedule
        .ok_or_else(|| Error::Format("denoiser checkpoint without a schedule".into()))?;
    let mlp = mlp_from(ck)?;
    let cond_table = ck.get("cond_table")?.clone();
    let freqs = ck.get("time_freqs")?.data().to_vec();
    if cond_table.shape().len() != 2 || cond_table.shape()[0] == 0 {
        return Err(Error::Format("cond_table must be a non-empty matrix".into()));
    }
    let range = ck.get("config.freq_range")?.data();
    if range.len() != 2 {
        return Err(Error::Format("config.freq_range must hold two values".into()));
    }
    let layers = mlp.layers();
    let config = DenoiserConfig {
        data_dim: mlp.output_dim(),
        hidden: layers[..layers.len() - 1].iter().map(Dense::fan_out).collect(),
        activation: mlp.activation(),
        time_freqs: freqs.len(),
        freq_min: range[0],
        freq_max: range[1],
        cond_dim: cond_table.shape()[1],
        num_classes: cond_table.shape()[0] - 1,
    };
    let model = Denoiser::from_parts(config, freqs, cond_table, mlp).map_err(|e| Error::Format(e.to_string()))?;
    Ok((model, sched))
}

pub fn save_denoiser(path: &Path, model: &Denoiser, sched: &NoiseSchedule) -> Result<()> {
    denoiser_checkpoint(model, sched).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, NoiseSchedule)> {
    denoiser_from(&Checkpoint::load(path)?).map_err(|e| e.context(format!("loading {}", path.display())))
}

pub fn save_classifier(path: &Path, classifier: &ToyClassifier) -> Result<()> {
    let mut arrays = vec![("model.kind".to_string(), Tensor::vector(vec![KIND_CLASSIFIER]))];
    mlp_arrays(classifier.mlp(), &mut arrays);
    Checkpoint {
        schedule: None,
        arrays,
    }
    .save(path)
}

pub fn load_classifier(path: &Path) -> Result<ToyClassifier> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(KIND_CLASSIFIER, "classifier")?;
    ToyClassifier::from_mlp(mlp_from(&ck)?)
}

/// An optimized conditioning embedding and the base condition it extends.
pub fn save_embedding(path: &Path, hash: &[f64], base: &[f64], sched: &NoiseSchedule) -> Result<()> {
    Checkpoint {
        schedule: Some(*sched),
        arrays: vec![
            ("model.kind".into(), Tensor::vector(vec![KIND_EMBEDDING])),
            ("hash".into(), Tensor::vector(hash.to_vec())),
            ("base".into(), Tensor::vector(base.to_vec())),
        ],
    }
    .save(path)
}

pub fn load_embedding(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(KIND_EMBEDDING, "embedding")?;
    Ok((ck.get("hash")?.data().to_vec(), ck.get("base")?.data().to_vec()))
}

/// Warn when sampling with a schedule other than the one a model was trained on.
pub fn check_schedule(trained: &NoiseSchedule, requested: &NoiseSchedule) -> bool {
    if trained != requested {
        log::warn!("sampling schedule {requested:?} differs from the training schedule {trained:?}");
        return false;
    }
    true
}
