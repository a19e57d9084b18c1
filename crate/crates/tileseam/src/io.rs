//! Bit-exact file formats: an NPY v1.0 subset for tensors, directory
//! checkpoints with a JSON manifest, report serialization (JSON/CSV) and
//! the training-log CSV. Everything is little-endian and platform
//! independent; golden-file tests guard the byte layout.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnose::{DisparityReport, MismatchReport, TrfResult};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainingLog;
use crate::unet::{Model, ModelConfig};

// ---------------------------------------------------------------------------
// NPY
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpyDtype {
    F4,
    F8,
}

impl NpyDtype {
    fn descr(&self) -> &'static str {
        match self {
            NpyDtype::F4 => "<f4",
            NpyDtype::F8 => "<f8",
        }
    }

    fn item_size(&self) -> usize {
        match self {
            NpyDtype::F4 => 4,
            NpyDtype::F8 => 8,
        }
    }
}

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

fn shape_tuple(shape: &[usize]) -> String {
    match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

/// Serializes a tensor as NPY v1.0 bytes. The header block (magic, version,
/// length field and dict text) is space-padded to a multiple of 64 bytes and
/// newline-terminated, matching the reference writer byte for byte.
pub fn npy_bytes(tensor: &Tensor, dtype: NpyDtype) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_tuple(tensor.shape())
    );
    let prefix = NPY_MAGIC.len() + 2 + 2; // magic + version + header length
    let unpadded = prefix + dict.len() + 1; // trailing newline
    let block = unpadded.div_ceil(64) * 64;
    let header_len = block - prefix;

    let mut out = Vec::with_capacity(block + tensor.len() * dtype.item_size());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[0x01, 0x00]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(block - 1, b' ');
    out.push(b'\n');
    for &v in tensor.data() {
        match dtype {
            NpyDtype::F8 => out.extend_from_slice(&v.to_le_bytes()),
            NpyDtype::F4 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    out
}

pub fn write_npy(path: &Path, tensor: &Tensor, dtype: NpyDtype) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&npy_bytes(tensor, dtype))?;
    Ok(())
}

/// Parses NPY v1.0 bytes. '<f4' payloads are upcast to f64; Fortran order
/// and any other dtype are rejected.
pub fn npy_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::Npy("bad magic: not an NPY file".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::Npy(format!(
            "unsupported NPY version {major}.{minor} (only 1.0)"
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + header_len {
        return Err(Error::Npy("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[10..10 + header_len])
        .map_err(|_| Error::Npy("header is not valid text".into()))?;

    let descr = dict_value(header, "descr")?;
    let dtype = match descr.trim_matches(['\'', '"']) {
        "<f8" => NpyDtype::F8,
        "<f4" => NpyDtype::F4,
        other => return Err(Error::Npy(format!("unsupported dtype '{other}'"))),
    };
    let fortran = dict_value(header, "fortran_order")?;
    match fortran.as_str() {
        "False" => {}
        "True" => {
            return Err(Error::Npy(
                "fortran_order=True is not supported (C order only)".into(),
            ))
        }
        other => return Err(Error::Npy(format!("bad fortran_order value '{other}'"))),
    }
    let shape_txt = dict_value(header, "shape")?;
    let inner = shape_txt
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Npy(format!("bad shape tuple '{shape_txt}'")))?;
    let shape: Vec<usize> = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Npy(format!("bad shape entry '{s}'")))
        })
        .collect::<Result<_>>()?;

    let count: usize = shape.iter().product();
    let payload = &bytes[10 + header_len..];
    if payload.len() != count * dtype.item_size() {
        return Err(Error::Npy(format!(
            "payload is {} bytes, expected {} for shape {:?} dtype {}",
            payload.len(),
            count * dtype.item_size(),
            shape,
            dtype.descr()
        )));
    }
    let mut data = Vec::with_capacity(count);
    match dtype {
        NpyDtype::F8 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        NpyDtype::F4 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
    }
    Tensor::from_vec(&shape, data)
}

/// Extracts the value text for a key in the canonical NPY header dict.
fn dict_value(header: &str, key: &str) -> Result<String> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| Error::Npy(format!("missing header key '{key}'")))?
        + pat.len();
    let rest = header[start..].trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find(',')
    }
    .ok_or_else(|| Error::Npy(format!("unterminated value for '{key}'")))?;
    Ok(rest[..end].trim().trim_end_matches(',').trim().to_string())
}

pub fn read_npy(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    npy_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NormMeta {
    momentum: f64,
    eps: f64,
    r_max: f64,
    d_max: f64,
    step_count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    step_count: u64,
    norm_layers: Vec<NormMeta>,
    tensors: Vec<TensorEntry>,
}

enum Slot<'a> {
    Tensor(&'a mut Tensor),
    Vec(&'a mut Vec<f64>),
}

/// Visits every named tensor (parameters and running statistics) in a
/// stable order shared by save and load.
fn for_each_tensor_slot(model: &mut Model, mut f: impl FnMut(String, Slot<'_>) -> Result<()>) -> Result<()> {
    fn visit_block(
        prefix: &str,
        b: &mut crate::unet::ConvBlock,
        f: &mut dyn FnMut(String, Slot<'_>) -> Result<()>,
    ) -> Result<()> {
        f(format!("{prefix}.conv.weight"), Slot::Tensor(&mut b.conv.weight))?;
        f(format!("{prefix}.conv.bias"), Slot::Vec(&mut b.conv.bias))?;
        if let Some(st) = b.norm.as_mut() {
            f(format!("{prefix}.norm.gamma"), Slot::Vec(&mut st.gamma))?;
            f(format!("{prefix}.norm.beta"), Slot::Vec(&mut st.beta))?;
            f(format!("{prefix}.norm.running_mu"), Slot::Vec(&mut st.running_mu))?;
            f(format!("{prefix}.norm.running_var"), Slot::Vec(&mut st.running_var))?;
        }
        Ok(())
    }
    let levels = model.config.levels;
    for (l, blocks) in model.enc.iter_mut().enumerate() {
        for (bi, b) in blocks.iter_mut().enumerate() {
            visit_block(&format!("enc{l}.block{bi}"), b, &mut f)?;
        }
    }
    for (bi, b) in model.bottleneck.iter_mut().enumerate() {
        visit_block(&format!("bottleneck.block{bi}"), b, &mut f)?;
    }
    for l in (0..levels).rev() {
        f(format!("up{l}.weight"), Slot::Tensor(&mut model.ups[l].weight))?;
        f(format!("up{l}.bias"), Slot::Vec(&mut model.ups[l].bias))?;
        for (bi, b) in model.dec[l].iter_mut().enumerate() {
            visit_block(&format!("dec{l}.block{bi}"), b, &mut f)?;
        }
    }
    f("final.weight".into(), Slot::Tensor(&mut model.final_conv.weight))?;
    f("final.bias".into(), Slot::Vec(&mut model.final_conv.bias))?;
    Ok(())
}

/// Saves a checkpoint directory: `manifest.json` plus one NPY per tensor.
/// `load_checkpoint(save_checkpoint(m))` reproduces every forward output
/// bit for bit.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut m = model.clone();
    let mut entries = Vec::new();
    for_each_tensor_slot(&mut m, |name, slot| {
        let (shape, tensor) = match slot {
            Slot::Tensor(t) => (t.shape().to_vec(), t.clone()),
            Slot::Vec(v) => (
                vec![v.len()],
                Tensor::from_vec(&[v.len()], v.clone())?,
            ),
        };
        let file = format!("{name}.npy");
        write_npy(&dir.join(&file), &tensor, NpyDtype::F8)?;
        entries.push(TensorEntry { name, shape, file });
        Ok(())
    })?;
    let manifest = Manifest {
        format_version: 1,
        config: model.config.clone(),
        step_count: model.step_count,
        norm_layers: model
            .norm_states()
            .iter()
            .map(|st| NormMeta {
                momentum: st.momentum,
                eps: st.eps,
                r_max: st.r_max,
                d_max: st.d_max,
                step_count: st.step_count,
            })
            .collect(),
        tensors: entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format_version {}",
            manifest.format_version
        )));
    }
    let mut model = Model::build(&manifest.config)?;
    model.step_count = manifest.step_count;

    let mut by_name = std::collections::BTreeMap::new();
    for e in &manifest.tensors {
        by_name.insert(e.name.clone(), e);
    }
    for_each_tensor_slot(&mut model, |name, slot| {
        let entry = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("manifest is missing tensor '{name}'")))?;
        let loaded = read_npy(&dir.join(&entry.file))?;
        if loaded.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': file shape {:?} != manifest shape {:?}",
                loaded.shape(),
                entry.shape
            )));
        }
        match slot {
            Slot::Tensor(t) => {
                if t.shape() != loaded.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}': shape {:?} does not match config shape {:?}",
                        loaded.shape(),
                        t.shape()
                    )));
                }
                *t = loaded;
            }
            Slot::Vec(v) => {
                if loaded.len() != v.len() {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}': length {} does not match config length {}",
                        loaded.len(),
                        v.len()
                    )));
                }
                *v = loaded.into_data();
            }
        }
        Ok(())
    })?;
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!(
            "manifest has unknown tensor '{extra}'"
        )));
    }
    let metas = manifest.norm_layers;
    let states = model.norm_states_mut();
    if metas.len() != states.len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} norm layers, model has {}",
            metas.len(),
            states.len()
        )));
    }
    for (st, meta) in states.into_iter().zip(metas) {
        st.momentum = meta.momentum;
        st.eps = meta.eps;
        st.r_max = meta.r_max;
        st.d_max = meta.d_max;
        st.step_count = meta.step_count;
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// One row of the summary table: a normalization strategy with its scores.
/// `mismatch = None` renders as the literal "no" (seamless).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub norm_kind: String,
    pub input_norm: String,
    pub dice_train: f64,
    pub dice_eval: f64,
    pub disparity: f64,
    pub max_dist: f64,
    pub mismatch: Option<f64>,
}

pub enum Report<'a> {
    Mismatch(&'a MismatchReport),
    Disparity(&'a DisparityReport),
    Table(&'a [TableRow]),
}

pub fn write_report(report: &Report<'_>, path: &Path, format: ReportFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = match (report, format) {
        (Report::Mismatch(r), ReportFormat::Json) => serde_json::to_string_pretty(r)?,
        (Report::Disparity(r), ReportFormat::Json) => serde_json::to_string_pretty(r)?,
        (Report::Table(rows), ReportFormat::Json) => serde_json::to_string_pretty(rows)?,
        (Report::Mismatch(r), ReportFormat::Csv) => mismatch_csv(r),
        (Report::Disparity(r), ReportFormat::Csv) => disparity_csv(r),
        (Report::Table(rows), ReportFormat::Csv) => table_csv(rows),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Formats the per-channel mismatch for tables: the literal "no" when the
/// predictions match exactly.
fn mismatch_cell(seamless: bool, value: f64) -> String {
    if seamless {
        "no".to_string()
    } else {
        format!("{value}")
    }
}

fn mismatch_csv(r: &MismatchReport) -> String {
    let mut s = String::from("channel,mismatch\n");
    for (ci, &m) in r.per_channel_mismatch.iter().enumerate() {
        s.push_str(&format!("{ci},{}\n", mismatch_cell(r.seamless, m)));
    }
    s.push_str(&format!("max_dist,{}\n", r.max_dist));
    s.push_str(&format!("tiles_compared,{}\n", r.tiles_compared));
    s
}

fn disparity_csv(r: &DisparityReport) -> String {
    let mut s = String::from("volume,disparity\n");
    for (i, &d) in r.per_volume.iter().enumerate() {
        s.push_str(&format!("{i},{d}\n"));
    }
    s.push_str(&format!("median,{}\n", r.median));
    s
}

fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("norm_kind,input_norm,dice_train,dice_eval,disparity,max_dist,mismatch\n");
    for r in rows {
        let mm = match r.mismatch {
            None => "no".to_string(),
            Some(v) => format!("{v}"),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.norm_kind, r.input_norm, r.dice_train, r.dice_eval, r.disparity, r.max_dist, mm
        ));
    }
    s
}

/// JSON-serializable receptive-field summary; the raw ERF map goes to NPY
/// via `write_npy` instead of being embedded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfSummary {
    pub trf: TrfResult,
    pub tile_size: usize,
    pub samples: usize,
    pub erf_log10_min: f64,
    pub erf_log10_max: f64,
}

pub fn write_rf_summary(summary: &RfSummary, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

/// Writes the center z-slice of a cubic map as a binary PGM for visual
/// inspection, linearly rescaled to 0..255.
pub fn write_pgm_center_slice(map: &Tensor, path: &Path) -> Result<()> {
    let [d, h, w] = map.dims3()?;
    let z = d / 2;
    let slice = &map.data()[z * h * w..(z + 1) * h * w];
    let lo = slice.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = Vec::with_capacity(32 + slice.len());
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in slice {
        out.push(((v - lo) * scale).round().clamp(0.0, 255.0) as u8);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Training-log CSV with the stable column set
/// (step, loss, r_max_eff, d_max_eff, wall_ms).
pub fn write_training_log_csv(log: &TrainingLog, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut s = String::from("step,loss,r_max_eff,d_max_eff,wall_ms\n");
    for r in &log.records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.r_max_eff, r.d_max_eff, r.wall_ms
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Mode, NormKind, StatUpdate};
    use crate::tensor::SplitMix64;
    use crate::unet::ModelConfig;

    #[test]
    fn npy_header_matches_reference_writer_bytes() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let got = npy_bytes(&t, NpyDtype::F8);
        let golden = include_bytes!("../tests/data/golden_2x3_f8.npy");
        assert_eq!(got.as_slice(), golden.as_slice());
    }

    #[test]
    fn npy_roundtrip_is_bit_exact_for_f8() {
        let mut rng = SplitMix64::new(1);
        let t = Tensor::normal(&[3, 4, 5], &mut rng);
        let back = npy_from_bytes(&npy_bytes(&t, NpyDtype::F8)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn npy_f4_reads_upcast() {
        let golden = include_bytes!("../tests/data/golden_5_f4.npy");
        let t = npy_from_bytes(golden).unwrap();
        assert_eq!(t.shape(), &[5]);
        assert_eq!(t.data(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn npy_rejects_fortran_order_distinctly() {
        let bytes = include_bytes!("../tests/data/fortran_2x2_f8.npy");
        let err = npy_from_bytes(bytes).unwrap_err();
        match err {
            Error::Npy(msg) => assert!(msg.contains("fortran_order"), "{msg}"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn npy_rejects_truncation_and_bad_magic() {
        let t = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = npy_bytes(&t, NpyDtype::F8);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(npy_from_bytes(&bytes), Err(Error::Npy(_))));
        let mut bad = npy_bytes(&t, NpyDtype::F8);
        bad[0] = b'X';
        assert!(matches!(npy_from_bytes(&bad), Err(Error::Npy(_))));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::new(NormKind::BatchRenorm)
            .with_features(vec![2, 3, 4])
            .with_seed(2);
        let mut model = Model::build(&cfg).unwrap();
        // Dirty the state so the roundtrip is non-trivial.
        model.step_count = 17;
        model.set_renorm_bounds(2.5, 4.0).unwrap();
        for st in model.norm_states_mut() {
            let c = st.channels();
            st.apply_update(&StatUpdate {
                mu: (0..c).map(|i| 0.1 * i as f64).collect(),
                var: (0..c).map(|i| 1.0 + 0.05 * i as f64).collect(),
            });
        }
        save_checkpoint(&model, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();

        assert_eq!(loaded.step_count, 17);
        for (a, b) in model.norm_states().iter().zip(loaded.norm_states()) {
            assert_eq!(a.running_mu, b.running_mu);
            assert_eq!(a.running_var, b.running_var);
            assert_eq!(a.step_count, b.step_count);
            assert_eq!(a.r_max, b.r_max);
            assert_eq!(a.d_max, b.d_max);
        }

        let mut rng = SplitMix64::new(3);
        let x = Tensor::uniform(&[1, 1, 8, 8, 8], &mut rng);
        let y0 = model.predict(&x, Mode::Eval).unwrap();
        let y1 = loaded.predict(&x, Mode::Eval).unwrap();
        assert_eq!(y0.data(), y1.data());
    }

    #[test]
    fn checkpoint_wrong_shape_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::new(NormKind::BatchNorm)
            .with_features(vec![2, 3, 4])
            .with_seed(4);
        let model = Model::build(&cfg).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        // Overwrite one tensor file with a wrong shape.
        let bad = Tensor::zeros(&[7]);
        write_npy(&dir.path().join("final.bias.npy"), &bad, NpyDtype::F8).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("final.bias"), "error must name the tensor: {msg}");
    }

    #[test]
    fn seamless_mismatch_serializes_as_no_in_csv() {
        let rep = MismatchReport {
            max_dist: 0.0,
            per_channel_mismatch: vec![0.0, 0.0],
            tiles_compared: 4,
            seamless: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mismatch.csv");
        write_report(&Report::Mismatch(&rep), &path, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("0,no"), "{text}");
        assert!(text.contains("1,no"), "{text}");
    }

    #[test]
    fn mismatch_json_roundtrips() {
        let rep = MismatchReport {
            max_dist: 0.25,
            per_channel_mismatch: vec![0.1, 0.02, 0.3],
            tiles_compared: 9,
            seamless: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mismatch.json");
        write_report(&Report::Mismatch(&rep), &path, ReportFormat::Json).unwrap();
        let back: MismatchReport =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn zero_disparity_serializes_as_number_not_sentinel() {
        let rep = DisparityReport {
            per_volume: vec![0.0, 0.0],
            median: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disp.csv");
        write_report(&Report::Disparity(&rep), &path, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("median,0\n"), "{text}");
        assert!(!text.contains("no"), "{text}");
    }

    #[test]
    fn table_csv_renders_no_for_seamless_rows() {
        let rows = vec![
            TableRow {
                norm_kind: "batchnorm".into(),
                input_norm: "global".into(),
                dice_train: 0.9,
                dice_eval: 0.5,
                disparity: 0.4,
                max_dist: 0.0,
                mismatch: None,
            },
            TableRow {
                norm_kind: "instancenorm".into(),
                input_norm: "global".into(),
                dice_train: 0.9,
                dice_eval: 0.9,
                disparity: 0.0,
                max_dist: 0.2,
                mismatch: Some(0.11),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        write_report(&Report::Table(&rows), &path, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",no"), "{text}");
        assert!(text.lines().nth(2).unwrap().ends_with(",0.11"), "{text}");
    }
}
