//! Run metrics, model checkpoints and embedding CSV export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{parse, Network, NetworkError, ShapeBindings};
use crate::data::LabeledDataset;
use crate::stats::pca2;
use crate::tensor::{Scalar, Tensor};
use crate::train::{embed, Embedded, EpochRecord, Evaluation, TrainConfig};

pub const PIXEL_SCALING: &str = "bytes divided by 255 into [0, 1], no mean subtraction";
const METRICS_FORMAT: &str = "intraclass-metrics/1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"ICLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> ReportError {
    ReportError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Everything a run reports. The embedded config is enough to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub format: String,
    pub pixel_scaling: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub nearest_centroid_accuracy: f64,
    pub max_score_accuracy: f64,
    /// Per class, learned center to training class mean.
    pub learned_centroid_distance: Vec<f64>,
    /// Per class, the zero initialization to training class mean.
    pub zero_init_distance: Vec<f64>,
    pub config: TrainConfig,
    pub epoch: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn new(
        config: &TrainConfig,
        train_samples: usize,
        test_samples: usize,
        history: Vec<EpochRecord>,
        eval: &Evaluation,
    ) -> Self {
        Self {
            format: METRICS_FORMAT.into(),
            pixel_scaling: PIXEL_SCALING.into(),
            train_samples,
            test_samples,
            nearest_centroid_accuracy: eval.nearest_centroid,
            max_score_accuracy: eval.max_score,
            learned_centroid_distance: eval.learned_distance.clone(),
            zero_init_distance: eval.zero_init_distance.clone(),
            config: config.clone(),
            epoch: history,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metrics serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        fs::write(path, self.to_toml()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
        if m.format != METRICS_FORMAT {
            return Err(format_err(
                path,
                format!("unsupported metrics format '{}'", m.format),
            ));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    arch: String,
    input_extent: usize,
    embed_dim: usize,
    classes: usize,
    config: TrainConfig,
    params: Vec<ParamEntry>,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend(v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend(v.to_le_bytes());
}

/// Writes weights and centers with a manifest naming each tensor.
pub fn save_checkpoint<T: Scalar>(
    net: &Network<T>,
    config: &TrainConfig,
    path: &Path,
) -> Result<(), ReportError> {
    let mut tensors: Vec<(String, &Tensor<T>)> = net
        .param_names()
        .iter()
        .cloned()
        .zip(net.params())
        .collect();
    if let Some(bank) = net.bank() {
        tensors.push((net.bank_name().to_string(), bank.tensor()));
    }
    let manifest = Manifest {
        dtype: T::DTYPE.into(),
        arch: net.graph().to_text(),
        input_extent: net.input_shape()[1],
        embed_dim: net.bindings().embed_dim,
        classes: net.classes(),
        config: config.clone(),
        params: tensors
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let manifest = toml::to_string(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    push_u64(&mut out, manifest.len() as u64);
    out.extend(manifest.as_bytes());
    for (name, t) in &tensors {
        push_u32(&mut out, name.len() as u32);
        out.extend(name.as_bytes());
        push_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            push_u64(&mut out, d as u64);
        }
        push_u64(&mut out, t.numel() as u64);
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ReportError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(self.path, "truncated checkpoint"));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ReportError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, ReportError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, ReportError> {
        usize::try_from(self.u64()?).map_err(|_| format_err(self.path, "length overflow"))
    }
}

/// Reads a checkpoint back into a network and the config it was trained with.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, TrainConfig), ReportError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let n = r.len()?;
    let text =
        std::str::from_utf8(r.take(n)?).map_err(|_| format_err(path, "manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| format_err(path, e.to_string()))?;
    if manifest.dtype != T::DTYPE {
        return Err(format_err(
            path,
            format!(
                "checkpoint holds {} values, expected {}",
                manifest.dtype,
                T::DTYPE
            ),
        ));
    }
    let graph =
        parse(&manifest.arch).map_err(|e| format_err(path, format!("architecture: {e}")))?;
    let bindings =
        ShapeBindings::new(manifest.embed_dim, manifest.classes).with_input(manifest.input_extent);
    let mut net =
        Network::<T>::build(&graph, bindings, 0).map_err(|e| format_err(path, e.to_string()))?;
    let width = std::mem::size_of::<T>();
    for entry in &manifest.params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| format_err(path, "bad tensor name"))?;
        if name != entry.name {
            return Err(format_err(
                path,
                format!("record '{name}' out of manifest order"),
            ));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        if shape != entry.shape {
            return Err(format_err(
                path,
                format!("record '{name}' disagrees with the manifest shape"),
            ));
        }
        let count = r.len()?;
        let raw = r.take(
            count
                .checked_mul(width)
                .ok_or_else(|| format_err(path, "length overflow"))?,
        )?;
        let data = raw.chunks(width).map(T::read_le).collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| format_err(path, format!("record '{name}': {e}")))?;
        net.set_param(&name, t)
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    if r.at != bytes.len() {
        return Err(format_err(path, "trailing bytes after the last record"));
    }
    Ok((net, manifest.config))
}

fn fmt_row(head: [String; 2], values: impl IntoIterator<Item = f64>) -> Vec<String> {
    head.into_iter()
        .chain(values.into_iter().map(|v| v.to_string()))
        .collect()
}

fn write_rows(path: &Path, rows: &[Vec<String>]) -> Result<(), ReportError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    for row in rows {
        w.write_record(row)
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

/// The companion file holding 2-component PCA projections.
pub fn pca_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(Default::default, |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.pca.csv"))
}

/// Writes `index,label,e_1..e_n` rows, then `centroid,k,c_1..c_n` rows. For
/// `n > 2` a second file gets the same rows projected on the top two
/// principal axes of the embeddings. Returns the files written.
pub fn write_embedding_csv(
    path: &Path,
    emb: &Embedded,
    centers: Option<&[Vec<f64>]>,
) -> Result<Vec<PathBuf>, ReportError> {
    let centers = centers.unwrap_or(&[]);
    let mut rows: Vec<Vec<String>> = (0..emb.len())
        .map(|i| {
            fmt_row(
                [i.to_string(), emb.labels[i].to_string()],
                emb.row(i).iter().copied(),
            )
        })
        .collect();
    rows.extend(
        centers
            .iter()
            .enumerate()
            .map(|(k, c)| fmt_row(["centroid".into(), k.to_string()], c.iter().copied())),
    );
    write_rows(path, &rows)?;
    let mut written = vec![path.to_path_buf()];
    if emb.dim > 2 {
        let pca = pca2(&emb.rows()).map_err(|e| format_err(path, format!("pca: {e}")))?;
        let mut rows: Vec<Vec<String>> = pca
            .projected
            .iter()
            .enumerate()
            .map(|(i, p)| fmt_row([i.to_string(), emb.labels[i].to_string()], *p))
            .collect();
        rows.extend(
            centers
                .iter()
                .enumerate()
                .map(|(k, c)| fmt_row(["centroid".into(), k.to_string()], pca.project(c))),
        );
        let pp = pca_path(path);
        write_rows(&pp, &rows)?;
        written.push(pp);
    }
    Ok(written)
}

/// Embeds `data` in inference mode and writes it with the learned centers.
pub fn export_embeddings<T: Scalar>(
    net: &Network<T>,
    data: &LabeledDataset,
    path: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    let emb = embed(net, data)?;
    let centers: Option<Vec<Vec<f64>>> = net.bank().map(|b| {
        (0..b.classes())
            .map(|k| b.center(k).iter().map(|v| v.as_f64()).collect())
            .collect()
    });
    write_embedding_csv(path, &emb, centers.as_deref())
}
