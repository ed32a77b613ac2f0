//! File formats: NTNS1 tensors, order-2 CSV, the model container and the
//! stream directory layout.
//!
//! NTNS1: `b"NTNS1"`, order `M` as u32 LE, `M` dims as u32 LE, then the
//! values as f64 LE, last index fastest.
//!
//! Model container: `b"NPLSM1\n"`, a u32 LE header length, a UTF-8
//! `key=value` header, then per component the blocks `beta`, `bias` and
//! one block per projector factor (input modes, then output mode).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::FormatError;
use crate::parafac::ProjectorSet;
use crate::pls::{LatentComponent, PlsModel, Truncation};
use crate::tensor::Tensor;
use crate::thresholding::{NormOrder, PenaltySpec};

pub const TENSOR_MAGIC: &[u8; 5] = b"NTNS1";
pub const MODEL_MAGIC: &[u8; 7] = b"NPLSM1\n";
/// Refuse tensors larger than this many elements (corrupt headers).
const MAX_ELEMENTS: usize = 1 << 31;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::Truncated(what),
        _ => FormatError::Io {
            path: PathBuf::new(),
            source: e,
        },
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.order() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor, FormatError> {
    let mut magic = [0u8; 5];
    read_exact_or(r, &mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(FormatError::BadMagic { expected: "NTNS1" });
    }
    let order = read_u32(r, "tensor order")? as usize;
    if order == 0 || order > 64 {
        return Err(FormatError::Header(format!("tensor order {order}")));
    }
    let mut dims = Vec::with_capacity(order);
    for _ in 0..order {
        dims.push(read_u32(r, "tensor dims")? as usize);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| FormatError::Header(format!("tensor dims {dims:?} too large")))?;
    let mut bytes = vec![0u8; len * 8];
    read_exact_or(r, &mut bytes, "tensor data")?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Tensor::new(dims, data)?)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), FormatError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let t = read_tensor(&mut r).map_err(|e| e.in_file(path))?;
    expect_eof(&mut r).map_err(|e| e.in_file(path))?;
    Ok(t)
}

fn expect_eof(r: &mut impl Read) -> Result<(), FormatError> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(FormatError::Header("trailing bytes after last block".into())),
        Err(e) => Err(FormatError::Io {
            path: PathBuf::new(),
            source: e,
        }),
    }
}

/// Order-2 tensor from comma-separated rows.
pub fn parse_csv_matrix(text: &str) -> Result<Tensor, FormatError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    FormatError::Csv(format!("line {}: cannot parse {:?}", lineno + 1, cell.trim()))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(FormatError::Csv(format!(
                    "line {}: {} columns, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(FormatError::Csv("no rows".into()));
    }
    let dims = vec![rows.len(), rows[0].len()];
    Ok(Tensor::new(dims, rows.concat())?)
}

pub fn format_csv_matrix(t: &Tensor) -> Result<String, FormatError> {
    if t.order() != 2 {
        return Err(FormatError::Csv(format!(
            "CSV holds order-2 tensors only, got order {}",
            t.order()
        )));
    }
    let cols = t.dims()[1];
    let mut out = String::new();
    for row in t.data().chunks_exact(cols) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Flat `key=value` text; blank lines and `#` comments ignored.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, FormatError> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::Header(format!("line {}: expected key=value", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn format_key_values(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn required<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, FormatError> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| FormatError::Header(format!("missing key {key:?}")))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, FormatError> {
    v.parse()
        .map_err(|_| FormatError::Header(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, FormatError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn format_penalty(p: &Option<PenaltySpec>) -> String {
    match p {
        Some(p) => format!("{}:{}", p.order.label(), p.lambda),
        None => "none".into(),
    }
}

fn parse_penalty(s: &str) -> Result<Option<PenaltySpec>, FormatError> {
    if s == "none" {
        return Ok(None);
    }
    let (order, lambda) = s
        .split_once(':')
        .ok_or_else(|| FormatError::Header(format!("penalty {s:?}")))?;
    let order: NormOrder = order
        .parse()
        .map_err(|e| FormatError::Header(format!("penalty {s:?}: {e}")))?;
    let lambda: f64 = parse_num("penalties", lambda)?;
    PenaltySpec::new(order, lambda)
        .map(Some)
        .map_err(|e| FormatError::Header(e.to_string()))
}

pub fn write_model(w: &mut impl Write, model: &PlsModel) -> io::Result<()> {
    let mut header = BTreeMap::new();
    header.insert("format".to_string(), "1".to_string());
    header.insert("input_dims".into(), join(&model.input_dims));
    header.insert("outputs".into(), model.outputs.to_string());
    header.insert(
        "penalties".into(),
        model.penalties.iter().map(format_penalty).collect::<Vec<_>>().join(","),
    );
    header.insert("mu".into(), model.mu.to_string());
    header.insert("components".into(), model.n_components().to_string());
    header.insert("f_star".into(), model.f_star.to_string());
    header.insert(
        "truncation".into(),
        model.truncation.map_or("none".into(), |t| t.to_string()),
    );
    let rhos: Vec<f64> = model.components.iter().map(|c| c.projectors.rho).collect();
    let scales: Vec<f64> = model.components.iter().map(|c| c.scale).collect();
    header.insert("rho".into(), join(&rhos));
    header.insert("scale".into(), join(&scales));
    let text = format_key_values(&header);

    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for c in &model.components {
        write_tensor(w, &c.beta)?;
        write_tensor(w, &vector_tensor(&c.bias))?;
        for f in &c.projectors.factors {
            write_tensor(w, &vector_tensor(f))?;
        }
    }
    Ok(())
}

fn vector_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("nonempty finite vector")
}

pub fn read_model(r: &mut impl Read) -> Result<PlsModel, FormatError> {
    let mut magic = [0u8; 7];
    read_exact_or(r, &mut magic, "model magic")?;
    if &magic != MODEL_MAGIC {
        return Err(FormatError::BadMagic { expected: "NPLSM1" });
    }
    let len = read_u32(r, "model header length")? as usize;
    if len > 1 << 20 {
        return Err(FormatError::Header(format!("header length {len}")));
    }
    let mut bytes = vec![0u8; len];
    read_exact_or(r, &mut bytes, "model header")?;
    let text = String::from_utf8(bytes).map_err(|_| FormatError::Header("header is not UTF-8".into()))?;
    let h = parse_key_values(&text)?;

    let input_dims: Vec<usize> = parse_list("input_dims", required(&h, "input_dims")?)?;
    let outputs: usize = parse_num("outputs", required(&h, "outputs")?)?;
    let penalties = required(&h, "penalties")?
        .split(',')
        .map(parse_penalty)
        .collect::<Result<Vec<_>, _>>()?;
    let mu: f64 = parse_num("mu", required(&h, "mu")?)?;
    let n_comp: usize = parse_num("components", required(&h, "components")?)?;
    let f_star: usize = parse_num("f_star", required(&h, "f_star")?)?;
    let truncation = match required(&h, "truncation")? {
        "none" => None,
        t => Some(t.parse::<Truncation>().map_err(FormatError::Header)?),
    };
    let rhos: Vec<f64> = parse_list("rho", required(&h, "rho")?)?;
    let scales: Vec<f64> = parse_list("scale", required(&h, "scale")?)?;
    if input_dims.is_empty() || penalties.len() != input_dims.len() {
        return Err(FormatError::Header("penalties do not match input_dims".into()));
    }
    if n_comp == 0 || f_star == 0 || f_star > n_comp || rhos.len() != n_comp || scales.len() != n_comp {
        return Err(FormatError::Header("inconsistent component counts".into()));
    }

    let mut beta_dims = input_dims.clone();
    beta_dims.push(outputs);
    let mut components = Vec::with_capacity(n_comp);
    for (rho, scale) in rhos.into_iter().zip(scales) {
        let beta = read_tensor(r)?;
        if beta.dims() != beta_dims.as_slice() {
            return Err(FormatError::Header(format!("beta dims {:?}", beta.dims())));
        }
        let bias = read_tensor(r)?.into_data();
        if bias.len() != outputs {
            return Err(FormatError::Header("bias length".into()));
        }
        let mut factors = Vec::with_capacity(beta_dims.len());
        for &d in &beta_dims {
            let f = read_tensor(r)?;
            if f.dims() != [d] {
                return Err(FormatError::Header(format!("projector dims {:?}", f.dims())));
            }
            factors.push(f.into_data());
        }
        components.push(LatentComponent {
            beta,
            bias,
            projectors: ProjectorSet { factors, rho },
            scale,
        });
    }
    expect_eof(r)?;
    Ok(PlsModel {
        input_dims,
        outputs,
        penalties,
        mu,
        components,
        f_star,
        truncation,
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &PlsModel) -> Result<(), FormatError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_model(&mut w, model).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PlsModel, FormatError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_model(&mut BufReader::new(file)).map_err(|e| e.in_file(path))
}

/// `manifest.txt` of a stream directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dims: Vec<usize>,
    pub outputs: usize,
    pub batch_size: usize,
    pub count: usize,
    /// Generator provenance (seed, noise, planted slices, ...).
    pub extra: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TRUTH_FILE: &str = "truth.ntns";

pub fn batch_file_name(index: usize) -> String {
    format!("batch_{index:05}.ntns")
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut map = self.extra.clone();
        map.insert("dims".into(), join(&self.dims));
        map.insert("outputs".into(), self.outputs.to_string());
        map.insert("batch_size".into(), self.batch_size.to_string());
        map.insert("count".into(), self.count.to_string());
        format_key_values(&map)
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut map = parse_key_values(text)?;
        let dims = parse_list("dims", required(&map, "dims")?)?;
        let outputs = parse_num("outputs", required(&map, "outputs")?)?;
        let batch_size = parse_num("batch_size", required(&map, "batch_size")?)?;
        let count = parse_num("count", required(&map, "count")?)?;
        for k in ["dims", "outputs", "batch_size", "count"] {
            map.remove(k);
        }
        Ok(Self {
            dims,
            outputs,
            batch_size,
            count,
            extra: map,
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::parse(&text).map_err(|e| e.in_file(&path))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), FormatError> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(io_err(&path))
    }
}

/// Writes a batch as two NTNS1 blocks: X with dims `N, I_1..I_M` and Y
/// with dims `N, Q`.
pub fn write_batch(w: &mut impl Write, xs: &[Tensor], ys: &[Vec<f64>]) -> Result<(), FormatError> {
    let Some(first) = xs.first() else {
        return Err(FormatError::Header("empty batch".into()));
    };
    let q = ys.first().map_or(0, Vec::len);
    let mut x_dims = vec![xs.len()];
    x_dims.extend_from_slice(first.dims());
    let x = Tensor::new(x_dims, xs.iter().flat_map(|t| t.data().iter().copied()).collect())?;
    let y = Tensor::new(vec![ys.len(), q], ys.concat())?;
    let io = |e| FormatError::Io {
        path: PathBuf::new(),
        source: e,
    };
    write_tensor(w, &x).map_err(io)?;
    write_tensor(w, &y).map_err(io)
}

pub fn read_batch(r: &mut impl Read) -> Result<(Vec<Tensor>, Vec<Vec<f64>>), FormatError> {
    let x = read_tensor(r)?;
    let y = read_tensor(r)?;
    if x.order() < 2 || y.order() != 2 || x.dims()[0] != y.dims()[0] {
        return Err(FormatError::Header(format!(
            "batch blocks have dims {:?} and {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let n = x.dims()[0];
    let sample_dims = x.dims()[1..].to_vec();
    let per = x.len() / n;
    let xs = x
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::new(sample_dims.clone(), c.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let ys = y.data().chunks_exact(y.dims()[1]).map(<[f64]>::to_vec).collect();
    Ok((xs, ys))
}

pub fn save_batch(path: impl AsRef<Path>, xs: &[Tensor], ys: &[Vec<f64>]) -> Result<(), FormatError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_batch(&mut w, xs, ys).map_err(|e| e.in_file(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load_batch(path: impl AsRef<Path>) -> Result<(Vec<Tensor>, Vec<Vec<f64>>), FormatError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let out = read_batch(&mut r).map_err(|e| e.in_file(path))?;
    expect_eof(&mut r).map_err(|e| e.in_file(path))?;
    Ok(out)
}
