//! USUB binary container for model weights, task subspaces and
//! discriminated subspaces.
//!
//! Layout: `"USUB"`, version (`u32` LE), metadata length (`u64` LE), UTF-8
//! JSON metadata, then every tensor as row-major `f64` LE in manifest order.
//! Metadata carries the object kind, its configuration and the manifest
//! (`name`, `shape`, byte `offset` into the payload).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, FormatError, Result};
use crate::linalg::Matrix;
use crate::model::{AttnRole, AttnWeight, BottleneckPair, ModelConfig, ModelWeights, ParamGroup};
use crate::subspace::{DiscriminatedMatrix, DiscriminatedSubspace, DiscriminationConfig};
use crate::training::{IdentificationMeta, LayerFactor, TaskSubspace};

pub const MAGIC: [u8; 4] = *b"USUB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Model,
    Subspace,
    Discriminated,
}

impl ObjectKind {
    fn as_str(self) -> &'static str {
        match self {
            ObjectKind::Model => "model",
            ObjectKind::Subspace => "subspace",
            ObjectKind::Discriminated => "discriminated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    kind: String,
    config: Value,
    manifest: Vec<ManifestEntry>,
}

/// A decoded container before it is turned into a typed object.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ObjectKind,
    pub config: Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, m) in &self.tensors {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                offset,
            });
            offset += 8 * m.as_slice().len() as u64;
        }
        let meta = serde_json::to_vec(&Metadata {
            kind: self.kind.as_str().to_string(),
            config: self.config.clone(),
            manifest,
        })
        .expect("metadata serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, m) in &self.tensors {
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let available = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(FormatError::TruncatedHeader {
                needed: HEADER_LEN as u64,
                available,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::TruncatedHeader {
                needed: HEADER_LEN as u64,
                available,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes"));
        let meta_end = (HEADER_LEN as u64).checked_add(meta_len).filter(|&e| e <= available).ok_or(
            FormatError::TruncatedHeader {
                needed: (HEADER_LEN as u64).saturating_add(meta_len),
                available,
            },
        )? as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| FormatError::Metadata(e.to_string()))?;
        let kind = match meta.kind.as_str() {
            "model" => ObjectKind::Model,
            "subspace" => ObjectKind::Subspace,
            "discriminated" => ObjectKind::Discriminated,
            other => return Err(FormatError::Metadata(format!("unknown object kind `{other}`"))),
        };
        let payload = &bytes[meta_end..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(meta.manifest.len());
        for e in meta.manifest {
            if e.offset != expected {
                return Err(FormatError::ManifestBounds(format!(
                    "tensor `{}` starts at {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            let count = (e.shape[0] as u64)
                .checked_mul(e.shape[1] as u64)
                .and_then(|c| c.checked_mul(8))
                .ok_or_else(|| FormatError::ManifestBounds(format!("tensor `{}` shape overflows", e.name)))?;
            let end = e.offset + count;
            if end > payload.len() as u64 {
                return Err(FormatError::ManifestBounds(format!(
                    "tensor `{}` spans bytes {}..{end} but the payload holds {}",
                    e.name,
                    e.offset,
                    payload.len()
                )));
            }
            let data: Vec<f64> = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(FormatError::NonFinite { name: e.name });
            }
            let m = Matrix::from_vec(e.shape[0], e.shape[1], data).expect("length and finiteness checked");
            tensors.push((e.name, m));
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(FormatError::ManifestBounds(format!(
                "payload holds {} bytes but the manifest covers {expected}",
                payload.len()
            )));
        }
        Ok(Self {
            kind,
            config: meta.config,
            tensors,
        })
    }

    fn expect_kind(&self, kind: ObjectKind) -> Result<(), FormatError> {
        if self.kind != kind {
            return Err(FormatError::WrongKind {
                found: self.kind.as_str().into(),
                expected: kind.as_str().into(),
            });
        }
        Ok(())
    }
}

/// Looks tensors up by name, checking shapes.
struct TensorTable(BTreeMap<String, Matrix>);

impl TensorTable {
    fn new(tensors: Vec<(String, Matrix)>) -> Result<Self, FormatError> {
        let mut map = BTreeMap::new();
        for (name, m) in tensors {
            if map.contains_key(&name) {
                return Err(FormatError::Metadata(format!("duplicate tensor `{name}`")));
            }
            map.insert(name, m);
        }
        Ok(Self(map))
    }

    fn take(&mut self, name: &str, shape: (usize, usize)) -> Result<Matrix, FormatError> {
        let m = self
            .0
            .remove(name)
            .ok_or_else(|| FormatError::Metadata(format!("manifest lacks tensor `{name}`")))?;
        if m.shape() != shape {
            return Err(FormatError::ShapeMismatch {
                name: name.into(),
                message: format!("stored {:?}, expected {shape:?}", m.shape()),
            });
        }
        Ok(m)
    }

    fn take_any(&mut self, name: &str, rows: usize) -> Result<Matrix, FormatError> {
        let cols = self.0.get(name).map(|m| m.cols()).unwrap_or(0);
        self.take(name, (rows, cols))
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.0.keys().next() {
            Some(extra) => Err(FormatError::Metadata(format!("unexpected tensor `{extra}`"))),
            None => Ok(()),
        }
    }
}

fn config_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn parse_config<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, FormatError> {
    serde_json::from_value(v).map_err(|e| FormatError::Metadata(format!("config: {e}")))
}

// ---- model ----

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    /// Attention kind per layer, in role order q, k, v, o.
    attention: Vec<[String; 4]>,
}

fn group_suffixes(g: ParamGroup) -> &'static [&'static str] {
    match g {
        ParamGroup::TokenEmbedding | ParamGroup::PosEmbedding | ParamGroup::Head => &["w"],
        ParamGroup::Norm1(_) | ParamGroup::Norm2(_) | ParamGroup::FinalNorm => &["gain", "bias"],
        ParamGroup::FeedForward(_) => &["w1", "b1", "w2", "b2"],
        ParamGroup::Attention(..) => unreachable!("attention is named per kind"),
    }
}

pub fn model_to_container(w: &ModelWeights) -> Container {
    let mut tensors = Vec::new();
    for g in w.groups() {
        if let ParamGroup::Attention(l, r) = g {
            match w.layers[l].attn(r) {
                AttnWeight::Dense(m) => tensors.push((format!("{g}.w"), m.clone())),
                AttnWeight::Bottleneck(p) => {
                    tensors.push((format!("{g}.f"), p.f.clone()));
                    tensors.push((format!("{g}.g"), p.g.clone()));
                }
                AttnWeight::Adapted { base, adapter } => {
                    tensors.push((format!("{g}.w"), base.clone()));
                    tensors.push((format!("{g}.f"), adapter.f.clone()));
                    tensors.push((format!("{g}.g"), adapter.g.clone()));
                }
            }
        } else {
            for (s, m) in group_suffixes(g).iter().zip(w.tensors(g)) {
                tensors.push((format!("{g}.{s}"), m.clone()));
            }
        }
    }
    let meta = ModelMeta {
        model: w.config.clone(),
        attention: w
            .layers
            .iter()
            .map(|l| AttnRole::ALL.map(|r| l.attn(r).kind().to_string()))
            .collect(),
    };
    Container {
        kind: ObjectKind::Model,
        config: config_value(&meta),
        tensors,
    }
}

pub fn model_from_container(c: Container) -> Result<ModelWeights> {
    c.expect_kind(ObjectKind::Model)?;
    let meta: ModelMeta = parse_config(c.config)?;
    meta.model
        .validate()
        .map_err(|e| FormatError::Metadata(format!("model config: {e}")))?;
    if meta.attention.len() != meta.model.n_layers {
        return Err(FormatError::Metadata(format!(
            "{} attention entries for {} layers",
            meta.attention.len(),
            meta.model.n_layers
        ))
        .into());
    }
    // Skeleton with the right shapes; every tensor is then overwritten.
    let mut w = crate::model::init_random(&meta.model, 0)?;
    let mut table = TensorTable::new(c.tensors)?;
    let d = meta.model.d_model;
    for g in w.groups() {
        if let ParamGroup::Attention(l, r) = g {
            let kind = &meta.attention[l][r.index()];
            let attn = match kind.as_str() {
                "dense" => AttnWeight::Dense(table.take(&format!("{g}.w"), (d, d))?),
                "bottleneck" | "adapted" => {
                    let base = if kind == "adapted" {
                        Some(table.take(&format!("{g}.w"), (d, d))?)
                    } else {
                        None
                    };
                    let f = table.take_any(&format!("{g}.f"), d)?;
                    let k = f.cols();
                    let gm = table.take(&format!("{g}.g"), (k, d))?;
                    let pair = BottleneckPair::new(f, gm).map_err(|e| FormatError::ShapeMismatch {
                        name: g.to_string(),
                        message: e.to_string(),
                    })?;
                    match base {
                        Some(base) => AttnWeight::Adapted { base, adapter: pair },
                        None => AttnWeight::Bottleneck(pair),
                    }
                }
                other => return Err(FormatError::Metadata(format!("unknown attention kind `{other}`")).into()),
            };
            *w.layers[l].attn_mut(r) = attn;
        } else {
            let names: Vec<(String, (usize, usize))> = group_suffixes(g)
                .iter()
                .zip(w.tensors(g))
                .map(|(s, m)| (format!("{g}.{s}"), m.shape()))
                .collect();
            for ((name, shape), slot) in names.into_iter().zip(w.tensors_mut(g)) {
                *slot = table.take(&name, shape)?;
            }
        }
    }
    table.finish()?;
    Ok(w)
}

// ---- task subspace ----

#[derive(Serialize, Deserialize)]
struct SubspaceMeta {
    task: String,
    k: usize,
    dim: usize,
    n_layers: usize,
    roles: Vec<AttnRole>,
    meta: IdentificationMeta,
}

pub fn subspace_to_container(s: &TaskSubspace) -> Container {
    let mut tensors = Vec::new();
    for (l, layer) in s.layers.iter().enumerate() {
        for (r, f) in layer {
            tensors.push((format!("layers.{l}.{r}.f"), f.f.clone()));
            tensors.push((format!("layers.{l}.{r}.g"), f.g.clone()));
            tensors.push((format!("layers.{l}.{r}.t"), f.t.clone()));
        }
    }
    Container {
        kind: ObjectKind::Subspace,
        config: config_value(&SubspaceMeta {
            task: s.task.clone(),
            k: s.k,
            dim: s.dim,
            n_layers: s.layers.len(),
            roles: s.roles.clone(),
            meta: s.meta.clone(),
        }),
        tensors,
    }
}

pub fn subspace_from_container(c: Container) -> Result<TaskSubspace> {
    c.expect_kind(ObjectKind::Subspace)?;
    let meta: SubspaceMeta = parse_config(c.config)?;
    let mut table = TensorTable::new(c.tensors)?;
    let (n, k) = (meta.dim, meta.k);
    let mut layers = Vec::with_capacity(meta.n_layers);
    for l in 0..meta.n_layers {
        let mut layer = BTreeMap::new();
        for &r in &meta.roles {
            let f = table.take(&format!("layers.{l}.{r}.f"), (n, k))?;
            let g = table.take(&format!("layers.{l}.{r}.g"), (k, n))?;
            let t = table.take(&format!("layers.{l}.{r}.t"), (n, n))?;
            layer.insert(r, LayerFactor { f, g, t });
        }
        layers.push(layer);
    }
    table.finish()?;
    Ok(TaskSubspace {
        task: meta.task,
        k,
        dim: n,
        roles: meta.roles,
        layers,
        meta: meta.meta,
    })
}

// ---- discriminated subspace ----

#[derive(Serialize, Deserialize)]
struct DiscriminatedMeta {
    task: String,
    others: Vec<String>,
    discrimination: DiscriminationConfig,
    dim: usize,
    /// Per layer: role → `[rank_before, others_rank]`.
    ranks: Vec<BTreeMap<AttnRole, [usize; 2]>>,
}

pub fn discriminated_to_container(s: &DiscriminatedSubspace) -> Container {
    let mut tensors = Vec::new();
    let mut dim = 0;
    for (l, layer) in s.layers.iter().enumerate() {
        for (r, d) in layer {
            dim = d.matrix.rows();
            tensors.push((format!("layers.{l}.{r}.t"), d.matrix.clone()));
            let s = Matrix::from_vec(1, d.singular_values.len(), d.singular_values.clone()).expect("finite singular values");
            tensors.push((format!("layers.{l}.{r}.s"), s));
        }
    }
    Container {
        kind: ObjectKind::Discriminated,
        config: config_value(&DiscriminatedMeta {
            task: s.task.clone(),
            others: s.others.clone(),
            discrimination: s.config.clone(),
            dim,
            ranks: s
                .layers
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|(&r, d)| (r, [d.rank_before, d.others_rank]))
                        .collect()
                })
                .collect(),
        }),
        tensors,
    }
}

pub fn discriminated_from_container(c: Container) -> Result<DiscriminatedSubspace> {
    c.expect_kind(ObjectKind::Discriminated)?;
    let meta: DiscriminatedMeta = parse_config(c.config)?;
    let mut table = TensorTable::new(c.tensors)?;
    let mut layers = Vec::with_capacity(meta.ranks.len());
    for (l, ranks) in meta.ranks.iter().enumerate() {
        let mut layer = BTreeMap::new();
        for (&r, &[rank_before, others_rank]) in ranks {
            let matrix = table.take(&format!("layers.{l}.{r}.t"), (meta.dim, meta.dim))?;
            let singular_values = table.take_any(&format!("layers.{l}.{r}.s"), 1)?.into_vec();
            layer.insert(
                r,
                DiscriminatedMatrix {
                    matrix,
                    rank_before,
                    singular_values,
                    others_rank,
                },
            );
        }
        layers.push(layer);
    }
    table.finish()?;
    Ok(DiscriminatedSubspace {
        task: meta.task,
        others: meta.others,
        config: meta.discrimination,
        layers,
    })
}

// ---- files ----

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let storage = |source| Error::Storage {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(storage)?;
    }
    let tmp = path.with_extension("usub.tmp");
    let mut f = fs::File::create(&tmp).map_err(storage)?;
    f.write_all(&c.encode()).map_err(storage)?;
    f.sync_all().map_err(storage)?;
    fs::rename(&tmp, path).map_err(storage)
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|source| Error::Storage {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Container::decode(&bytes)?)
}

pub fn save_model(path: &Path, w: &ModelWeights) -> Result<()> {
    write_container(path, &model_to_container(w))
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    model_from_container(read_container(path)?)
}

pub fn save_subspace(path: &Path, s: &TaskSubspace) -> Result<()> {
    write_container(path, &subspace_to_container(s))
}

pub fn load_subspace(path: &Path) -> Result<TaskSubspace> {
    subspace_from_container(read_container(path)?)
}

pub fn save_discriminated(path: &Path, s: &DiscriminatedSubspace) -> Result<()> {
    write_container(path, &discriminated_to_container(s))
}

pub fn load_discriminated(path: &Path) -> Result<DiscriminatedSubspace> {
    discriminated_from_container(read_container(path)?)
}
