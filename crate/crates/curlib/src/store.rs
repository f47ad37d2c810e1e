//! Bit-exact model persistence.
//!
//! A saved model is a directory holding `manifest.json` plus raw tensor files
//! under `tensors/`. The manifest is canonical JSON (sorted keys, LF
//! newlines, trailing newline); tensors are raw little-endian 32-bit floats
//! in row-major order. Parameters live in `f64` in memory and `f32` on disk,
//! and loading widens losslessly, so save-load-save produces byte-identical
//! directories.
//!
//! Factorized weights persist their four factors separately — the healed
//! core correction is never folded into the base core, so a round trip
//! preserves healing provenance.
//!
//! Writers take an advisory lock file (`.lock`, created exclusively, removed
//! on drop); concurrent readers need no coordination.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cur::CurFactors;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::{
    CalibrationStats, LayerWeights, ModelConfig, ToyTransformer, Weight, WeightTarget,
};

const FORMAT_VERSION: u64 = 1;
const DTYPE: &str = "f32";
const BYTE_ORDER: &str = "little-endian";
const LAYOUT: &str = "row-major";

/// Description of one raw tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_order: String,
    pub layout: String,
}

/// Description of one factorized weight: four tensor files plus the selected
/// indices inline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorEntry {
    pub name: String,
    pub role: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub p: Vec<usize>,
    pub q: Vec<usize>,
    pub c: TensorEntry,
    pub u0: TensorEntry,
    pub du: TensorEntry,
    pub r: TensorEntry,
}

/// Complete description of a saved model directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub factors: Vec<FactorEntry>,
}

/// RAII advisory write lock on a directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                Error::io(
                    format!(
                        "acquiring write lock {} (another writer may be active)",
                        path.display()
                    ),
                    e,
                )
            })?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Serializes any value as canonical JSON: sorted object keys, LF newlines,
/// one trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // Round-tripping through `Value` sorts object keys (its map is ordered by
    // key), which struct serialization alone would not guarantee.
    let v = serde_json::to_value(value)
        .map_err(|e| Error::CorruptManifest(format!("encoding JSON: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v)
        .map_err(|e| Error::CorruptManifest(format!("encoding JSON: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn tensor_bytes(data: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

struct TensorWriter<'a> {
    dir: &'a Path,
}

impl TensorWriter<'_> {
    fn write(&self, name: &str, role: &str, shape: Vec<usize>, data: &[f64]) -> Result<TensorEntry> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let file = format!("tensors/{name}.bin");
        write_file(&self.dir.join(&file), &tensor_bytes(data))?;
        Ok(TensorEntry {
            name: name.to_string(),
            role: role.to_string(),
            shape,
            dtype: DTYPE.to_string(),
            file,
            byte_order: BYTE_ORDER.to_string(),
            layout: LAYOUT.to_string(),
        })
    }

    fn matrix(&self, name: &str, role: &str, m: &DenseMatrix) -> Result<TensorEntry> {
        self.write(name, role, vec![m.rows(), m.cols()], m.data())
    }
}

/// Writes the model into `dir` and returns the manifest that was stored.
///
/// Any previous `tensors/` content is removed first, so the directory always
/// reflects exactly one model.
pub fn save_model(model: &ToyTransformer, dir: &Path) -> Result<Manifest> {
    model.config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let _lock = DirLock::acquire(dir)?;
    let tensors_dir = dir.join("tensors");
    if tensors_dir.exists() {
        fs::remove_dir_all(&tensors_dir)
            .map_err(|e| Error::io(format!("clearing {}", tensors_dir.display()), e))?;
    }
    fs::create_dir(&tensors_dir)
        .map_err(|e| Error::io(format!("creating {}", tensors_dir.display()), e))?;

    let w = TensorWriter { dir };
    let mut tensors = Vec::new();
    let mut factors = Vec::new();

    tensors.push(w.matrix("tok_embed", "token-embedding", &model.tok_embed)?);
    tensors.push(w.matrix("pos_embed", "position-embedding", &model.pos_embed)?);
    for (i, layer) in model.layers.iter().enumerate() {
        let named = [
            (format!("layers.{i}.wq"), "attn-query", &layer.wq),
            (format!("layers.{i}.wk"), "attn-key", &layer.wk),
            (format!("layers.{i}.wv"), "attn-value", &layer.wv),
            (format!("layers.{i}.wo"), "attn-output", &layer.wo),
            (format!("layers.{i}.w_gate"), "ffn-gate", &layer.w_gate),
            (format!("layers.{i}.w_up"), "ffn-up", &layer.w_up),
            (format!("layers.{i}.w_down"), "ffn-down", &layer.w_down),
        ];
        for (name, role, weight) in named {
            match weight {
                Weight::Dense(m) => tensors.push(w.matrix(&name, role, m)?),
                Weight::Cur(f) => factors.push(FactorEntry {
                    rows: f.in_dim(),
                    cols: f.out_dim(),
                    rank: f.rank,
                    p: f.p.clone(),
                    q: f.q.clone(),
                    c: w.matrix(&format!("{name}.c"), "factor-columns", &f.c)?,
                    u0: w.matrix(&format!("{name}.u0"), "factor-core", &f.u0)?,
                    du: w.matrix(&format!("{name}.du"), "factor-core-delta", &f.du)?,
                    r: w.matrix(&format!("{name}.r"), "factor-rows", &f.r_mat)?,
                    name,
                    role: role.to_string(),
                }),
            }
        }
        tensors.push(w.write(
            &format!("layers.{i}.attn_norm"),
            "norm-gain",
            vec![layer.attn_norm.len()],
            &layer.attn_norm,
        )?);
        tensors.push(w.write(
            &format!("layers.{i}.ffn_norm"),
            "norm-gain",
            vec![layer.ffn_norm.len()],
            &layer.ffn_norm,
        )?);
    }
    tensors.push(w.write(
        "final_norm",
        "norm-gain",
        vec![model.final_norm.len()],
        &model.final_norm,
    )?);
    tensors.push(w.matrix("w_out", "output-head", &model.w_out)?);

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config,
        tensors,
        factors,
    };
    write_file(&dir.join("manifest.json"), canonical_json(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn read_raw(dir: &Path, entry: &TensorEntry) -> Result<Vec<f64>> {
    if entry.dtype != DTYPE || entry.byte_order != BYTE_ORDER || entry.layout != LAYOUT {
        return Err(Error::CorruptManifest(format!(
            "tensor {} declares unsupported encoding {}/{}/{}",
            entry.name, entry.dtype, entry.byte_order, entry.layout
        )));
    }
    let path = dir.join(&entry.file);
    let bytes =
        fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let expected = entry.shape.iter().product::<usize>() as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::ShapeMismatch {
            name: entry.name.clone(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn read_matrix(dir: &Path, entry: &TensorEntry, rows: usize, cols: usize) -> Result<DenseMatrix> {
    if entry.shape != [rows, cols] {
        return Err(Error::CorruptManifest(format!(
            "tensor {} has shape {:?}, expected [{rows}, {cols}]",
            entry.name, entry.shape
        )));
    }
    DenseMatrix::new(rows, cols, read_raw(dir, entry)?)
}

fn read_vector(dir: &Path, entry: &TensorEntry, len: usize) -> Result<Vec<f64>> {
    if entry.shape != [len] {
        return Err(Error::CorruptManifest(format!(
            "tensor {} has shape {:?}, expected [{len}]",
            entry.name, entry.shape
        )));
    }
    read_raw(dir, entry)
}

/// Reads a model back from a directory written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<ToyTransformer> {
    let path = dir.join("manifest.json");
    let text =
        fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptManifest(format!("parsing {}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.format_version));
    }
    let cfg = manifest.config;
    cfg.validate()?;

    let tensor_by_name = |name: &str| -> Result<&TensorEntry> {
        manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::CorruptManifest(format!("missing tensor {name}")))
    };
    let weight = |name: &str, rows: usize, cols: usize| -> Result<Weight> {
        if let Some(f) = manifest.factors.iter().find(|f| f.name == name) {
            if f.rows != rows || f.cols != cols {
                return Err(Error::CorruptManifest(format!(
                    "factor {name} is {}x{}, expected {rows}x{cols}",
                    f.rows, f.cols
                )));
            }
            if f.rank == 0 || f.rank > rows.min(cols) {
                return Err(Error::CorruptManifest(format!(
                    "factor {name} has rank {} for a {rows}x{cols} weight",
                    f.rank
                )));
            }
            if f.p.len() != f.rank || f.q.len() != f.rank {
                return Err(Error::CorruptManifest(format!(
                    "factor {name} index arrays do not match rank {}",
                    f.rank
                )));
            }
            if f.p.iter().any(|&i| i >= rows) || f.q.iter().any(|&j| j >= cols) {
                return Err(Error::CorruptManifest(format!(
                    "factor {name} has out-of-range selected indices"
                )));
            }
            return Ok(Weight::Cur(CurFactors {
                c: read_matrix(dir, &f.c, rows, f.rank)?,
                u0: read_matrix(dir, &f.u0, f.rank, f.rank)?,
                du: read_matrix(dir, &f.du, f.rank, f.rank)?,
                r_mat: read_matrix(dir, &f.r, f.rank, cols)?,
                p: f.p.clone(),
                q: f.q.clone(),
                rank: f.rank,
            }));
        }
        Ok(Weight::Dense(read_matrix(dir, tensor_by_name(name)?, rows, cols)?))
    };

    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(LayerWeights {
            wq: weight(&format!("layers.{i}.wq"), d, d)?,
            wk: weight(&format!("layers.{i}.wk"), d, cfg.d_kv())?,
            wv: weight(&format!("layers.{i}.wv"), d, cfg.d_kv())?,
            wo: weight(&format!("layers.{i}.wo"), d, d)?,
            w_gate: weight(&format!("layers.{i}.w_gate"), d, cfg.d_inter)?,
            w_up: weight(&format!("layers.{i}.w_up"), d, cfg.d_inter)?,
            w_down: weight(&format!("layers.{i}.w_down"), cfg.d_inter, d)?,
            attn_norm: read_vector(dir, tensor_by_name(&format!("layers.{i}.attn_norm"))?, d)?,
            ffn_norm: read_vector(dir, tensor_by_name(&format!("layers.{i}.ffn_norm"))?, d)?,
        });
    }
    Ok(ToyTransformer {
        config: cfg,
        tok_embed: read_matrix(dir, tensor_by_name("tok_embed")?, cfg.vocab, d)?,
        pos_embed: read_matrix(dir, tensor_by_name("pos_embed")?, cfg.max_seq, d)?,
        layers,
        final_norm: read_vector(dir, tensor_by_name("final_norm")?, d)?,
        w_out: read_matrix(dir, tensor_by_name("w_out")?, d, cfg.vocab)?,
    })
}

/// Writes calibration stats as canonical JSON. Values stay `f64` (JSON keeps
/// the shortest round-trippable decimal form), so a reload is bit-exact.
pub fn save_stats(stats: &CalibrationStats, path: &Path) -> Result<()> {
    write_file(path, canonical_json(stats)?.as_bytes())
}

/// Reads calibration stats saved by [`save_stats`].
pub fn load_stats(path: &Path) -> Result<CalibrationStats> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let stats: CalibrationStats = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptManifest(format!("parsing {}: {e}", path.display())))?;
    stats.config.validate()?;
    if stats.act_norms.len() != stats.config.n_layers {
        return Err(Error::CorruptManifest(format!(
            "stats carry {} layers of norms for a {}-layer config",
            stats.act_norms.len(),
            stats.config.n_layers
        )));
    }
    Ok(stats)
}

/// Casts every parameter of a model through `f32` in place, exactly matching
/// what a save/load round trip produces. Useful for comparing in-memory
/// models against stored ones.
pub fn quantize_to_f32(model: &mut ToyTransformer) {
    let visit = |m: &mut DenseMatrix| {
        for v in m.data_mut() {
            *v = *v as f32 as f64;
        }
    };
    let visit_vec = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x = *x as f32 as f64;
        }
    };
    visit(&mut model.tok_embed);
    visit(&mut model.pos_embed);
    for layer in &mut model.layers {
        for t in [
            &mut layer.wq,
            &mut layer.wk,
            &mut layer.wv,
            &mut layer.wo,
            &mut layer.w_gate,
            &mut layer.w_up,
            &mut layer.w_down,
        ] {
            match t {
                Weight::Dense(m) => visit(m),
                Weight::Cur(f) => {
                    visit(&mut f.c);
                    visit(&mut f.u0);
                    visit(&mut f.du);
                    visit(&mut f.r_mat);
                }
            }
        }
        visit_vec(&mut layer.attn_norm);
        visit_vec(&mut layer.ffn_norm);
    }
    visit_vec(&mut model.final_norm);
    visit(&mut model.w_out);
}

/// Returns every factorized `(layer, target)` of a model, for manifest
/// cross-checks.
pub fn factorized_weights(model: &ToyTransformer) -> Vec<(usize, WeightTarget)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        for t in WeightTarget::ALL {
            if layer.target(t).as_cur().is_some() {
                out.push((i, t));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cur::cur_decompose;
    use crate::model::{calibrate, synthetic_corpus};
    use crate::selection::Strategy;
    use std::collections::BTreeMap;

    fn tiny() -> ToyTransformer {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_k: 4,
            n_kv_heads: 1,
            d_inter: 12,
            vocab: 16,
            max_seq: 6,
        };
        ToyTransformer::new_random(cfg, 3).unwrap()
    }

    fn compressed_tiny() -> ToyTransformer {
        let mut model = tiny();
        let w = model.layers[1].wq.materialize();
        let mut f = cur_decompose(&w, 3, Strategy::DeimOnly, None, None).unwrap();
        // A nonzero core delta, as a healed model would have.
        f.du.set(0, 1, 0.125);
        f.du.set(2, 2, -0.5);
        model.layers[1].wq = Weight::Cur(f);
        model
    }

    fn dir_snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                    out.insert(rel, fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn round_trip_equals_f32_cast() {
        let model = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        let mut expected = model.clone();
        quantize_to_f32(&mut expected);
        assert_eq!(loaded, expected);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let model = compressed_tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_model(&model, a.path()).unwrap();
        save_model(&model, b.path()).unwrap();
        assert_eq!(dir_snapshot(a.path()), dir_snapshot(b.path()));
    }

    #[test]
    fn save_load_save_is_idempotent() {
        let model = compressed_tiny();
        let a = tempfile::tempdir().unwrap();
        save_model(&model, a.path()).unwrap();
        let loaded = load_model(a.path()).unwrap();
        let b = tempfile::tempdir().unwrap();
        save_model(&loaded, b.path()).unwrap();
        assert_eq!(dir_snapshot(a.path()), dir_snapshot(b.path()));
    }

    #[test]
    fn resaving_into_the_same_directory_drops_stale_tensors() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&compressed_tiny(), dir.path()).unwrap();
        assert!(dir.path().join("tensors/layers.1.wq.c.bin").exists());
        save_model(&tiny(), dir.path()).unwrap();
        assert!(!dir.path().join("tensors/layers.1.wq.c.bin").exists());
        assert!(dir.path().join("tensors/layers.1.wq.bin").exists());
    }

    #[test]
    fn factor_round_trip_keeps_core_delta_separate() {
        let model = compressed_tiny();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_model(&model, dir.path()).unwrap();
        let entry = &manifest.factors[0];
        let orig = model.layers[1].wq.as_cur().unwrap();
        assert_eq!(entry.name, "layers.1.wq");
        assert_eq!(entry.p, orig.p);
        assert_eq!(entry.q, orig.q);
        assert_eq!(entry.rank, orig.rank);

        let loaded = load_model(dir.path()).unwrap();
        let f = loaded.layers[1].wq.as_cur().unwrap();
        assert_eq!(f.du.get(0, 1), 0.125);
        assert_eq!(f.du.get(2, 2), -0.5);
        // u0 was not pre-summed with du.
        assert_eq!(f.u0.get(0, 1), orig.u0.get(0, 1) as f32 as f64);
    }

    #[test]
    fn loaded_model_forward_matches_within_f32_slack() {
        let model = compressed_tiny();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        let tokens = [1, 5, 2, 9];
        let a = model.forward(&tokens).unwrap().logits;
        let b = loaded.forward(&tokens).unwrap().logits;
        let diff = a.sub(&b).unwrap().max_abs();
        assert!(diff < 1e-5, "diff {diff}");
    }

    #[test]
    fn truncated_tensor_is_a_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        let victim = dir.path().join("tensors/w_out.bin");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::ShapeMismatch { name, .. }) if name == "w_out"
        ));
    }

    #[test]
    fn out_of_range_index_is_a_corrupt_manifest() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&compressed_tiny(), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["factors"][0]["q"][0] = serde_json::json!(999);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::CorruptManifest(_))
        ));
    }

    #[test]
    fn future_format_versions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["format_version"] = serde_json::json!(2);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn missing_manifest_is_an_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::IoFailure { .. })
        ));
    }

    #[test]
    fn held_lock_blocks_writers_and_is_released_after_save() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(".lock"), b"").unwrap();
        assert!(matches!(
            save_model(&tiny(), dir.path()),
            Err(Error::IoFailure { .. })
        ));
        fs::remove_file(dir.path().join(".lock")).unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        assert!(!dir.path().join(".lock").exists());
    }

    #[test]
    fn manifest_json_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(text.ends_with('\n'));
        assert!(!text.contains('\r'));
        // Object keys come out sorted: config's first keys appear in
        // alphabetical order.
        let c = text.find("\"config\"").unwrap();
        let d1 = text[c..].find("\"d_inter\"").unwrap();
        let d2 = text[c..].find("\"d_k\"").unwrap();
        let d3 = text[c..].find("\"d_model\"").unwrap();
        assert!(d1 < d2 && d2 < d3);
    }

    #[test]
    fn stats_round_trip_is_bit_exact() {
        let model = tiny();
        let corpus = synthetic_corpus(3, 6, model.config.vocab, 8).unwrap();
        let stats = calibrate(&model, &corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        save_stats(&stats, &path).unwrap();
        let loaded = load_stats(&path).unwrap();
        assert_eq!(stats, loaded);
        // Saving the reload is byte-identical.
        let path2 = dir.path().join("stats2.json");
        save_stats(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn factorized_weight_listing() {
        assert!(factorized_weights(&tiny()).is_empty());
        assert_eq!(
            factorized_weights(&compressed_tiny()),
            vec![(1, WeightTarget::Query)]
        );
    }
}
