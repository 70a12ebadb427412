//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.txt` (one `key=value` per line) and one
//! table per split, either
//!
//! * CSV: `<split>.csv` with header `window_id,label,channel,t,value` (label
//!   empty when absent) plus `<split>_sessions.csv` with `window_id,session`;
//! * binary: `<split>.bin`, little-endian:
//!
//! ```text
//! magic      8 bytes  "IMUWIN\0\0"
//! version    u32      1
//! channels   u32      6
//! window_len u32
//! count      u64
//! count × { id u64, label i64 (-1 = none), session u32, 6·window_len f64 channel-major }
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{DatasetSplit, ImuWindow, CHANNELS};
use crate::error::{format_err, invalid, Result};
use crate::Scalar;

const BIN_MAGIC: &[u8; 8] = b"IMUWIN\0\0";
const BIN_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Binary,
}

impl DatasetFormat {
    fn as_str(self) -> &'static str {
        match self {
            DatasetFormat::Csv => "csv",
            DatasetFormat::Binary => "binary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format: DatasetFormat,
    pub seed: u64,
    pub window_len: usize,
    pub sample_rate_hz: f64,
    pub num_classes: usize,
    pub unknown_label: Option<usize>,
    pub counts: BTreeMap<String, usize>,
}

impl Manifest {
    fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("format_version=1\n");
        s.push_str(&format!("storage={}\n", self.format.as_str()));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("window_len={}\n", self.window_len));
        s.push_str(&format!("channels={CHANNELS}\n"));
        s.push_str(&format!("sample_rate_hz={}\n", self.sample_rate_hz));
        s.push_str(&format!("num_classes={}\n", self.num_classes));
        match self.unknown_label {
            Some(l) => s.push_str(&format!("unknown_label={l}\n")),
            None => s.push_str("unknown_label=\n"),
        }
        for (k, v) in &self.counts {
            s.push_str(&format!("count.{k}={v}\n"));
        }
        s
    }

    fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| format_err("manifest", format!("line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| format_err("manifest", format!("missing key {k}")));
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse::<u64>().map_err(|e| format_err("manifest", format!("{k}: {e}")))
        };
        let format = match get("storage")?.as_str() {
            "csv" => DatasetFormat::Csv,
            "binary" => DatasetFormat::Binary,
            other => return Err(format_err("manifest", format!("unknown storage {other}"))),
        };
        if num("channels")? != CHANNELS as u64 {
            return Err(format_err("manifest", "channel count must be 6"));
        }
        let unknown_label = match get("unknown_label")?.as_str() {
            "" => None,
            v => Some(v.parse().map_err(|e| format_err("manifest", format!("unknown_label: {e}")))?),
        };
        let counts = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("count.").map(|name| (name.to_string(), v)))
            .map(|(k, v)| v.parse().map(|n| (k, n)).map_err(|e| format_err("manifest", format!("count: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            format,
            seed: num("seed")?,
            window_len: num("window_len")? as usize,
            sample_rate_hz: get("sample_rate_hz")?
                .parse()
                .map_err(|e| format_err("manifest", format!("sample_rate_hz: {e}")))?,
            num_classes: num("num_classes")? as usize,
            unknown_label,
            counts,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(dir.join(MANIFEST))?)
}

pub fn write_csv_split<T: Scalar>(path: &Path, windows: &[ImuWindow<T>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "window_id,label,channel,t,value")?;
    for w in windows {
        let label = w.label.map(|l| l.to_string()).unwrap_or_default();
        for c in 0..CHANNELS {
            for (t, v) in w.channel(c).iter().enumerate() {
                writeln!(out, "{},{},{},{},{}", w.id, label, c, t, v.as_f64())?;
            }
        }
    }
    out.flush()?;
    let mut sess = BufWriter::new(File::create(sessions_path(path))?);
    writeln!(sess, "window_id,session")?;
    for w in windows {
        writeln!(sess, "{},{}", w.id, w.session)?;
    }
    sess.flush()?;
    Ok(())
}

fn sessions_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("split");
    path.with_file_name(format!("{stem}_sessions.csv"))
}

fn parse_field<F: std::str::FromStr>(field: Option<&str>, what: &str, line: usize) -> Result<F>
where
    F::Err: std::fmt::Display,
{
    let raw = field.ok_or_else(|| format_err("dataset csv", format!("line {line}: missing {what}")))?;
    raw.trim().parse().map_err(|e| format_err("dataset csv", format!("line {line}: {what}: {e}")))
}

pub fn read_csv_split<T: Scalar>(path: &Path, window_len: usize) -> Result<Vec<ImuWindow<T>>> {
    struct Pending {
        label: Option<usize>,
        values: Vec<Option<f64>>,
    }
    let reader = BufReader::new(File::open(path)?);
    let mut order = Vec::new();
    let mut pending: BTreeMap<u64, Pending> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "window_id,label,channel,t,value" {
                return Err(format_err("dataset csv", format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let id: u64 = parse_field(f.next(), "window_id", i + 1)?;
        let label_raw = f.next().unwrap_or("").trim();
        let label = if label_raw.is_empty() { None } else { Some(parse_field(Some(label_raw), "label", i + 1)?) };
        let c: usize = parse_field(f.next(), "channel", i + 1)?;
        let t: usize = parse_field(f.next(), "t", i + 1)?;
        let v: f64 = parse_field(f.next(), "value", i + 1)?;
        if c >= CHANNELS || t >= window_len {
            return Err(format_err("dataset csv", format!("line {}: channel {c} / t {t} out of range", i + 1)));
        }
        let entry = pending.entry(id).or_insert_with(|| {
            order.push(id);
            Pending { label, values: vec![None; CHANNELS * window_len] }
        });
        if entry.label != label {
            return Err(format_err("dataset csv", format!("window {id} has inconsistent labels")));
        }
        entry.values[c * window_len + t] = Some(v);
    }

    let mut sessions = BTreeMap::new();
    let spath = sessions_path(path);
    if spath.exists() {
        for (i, line) in BufReader::new(File::open(&spath)?).lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.split(',');
            let id: u64 = parse_field(f.next(), "window_id", i + 1)?;
            let s: u32 = parse_field(f.next(), "session", i + 1)?;
            sessions.insert(id, s);
        }
    }

    order
        .into_iter()
        .map(|id| {
            let p = pending.remove(&id).expect("id recorded on insert");
            let values = p
                .values
                .into_iter()
                .map(|v| v.map(T::lit))
                .collect::<Option<Vec<T>>>()
                .ok_or_else(|| format_err("dataset csv", format!("window {id} is missing samples")))?;
            ImuWindow::new(id, p.label, sessions.get(&id).copied().unwrap_or(0), values)
        })
        .collect()
}

pub fn write_binary_split<T: Scalar>(path: &Path, windows: &[ImuWindow<T>], window_len: usize) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(BIN_MAGIC)?;
    out.write_all(&BIN_VERSION.to_le_bytes())?;
    out.write_all(&(CHANNELS as u32).to_le_bytes())?;
    out.write_all(&(window_len as u32).to_le_bytes())?;
    out.write_all(&(windows.len() as u64).to_le_bytes())?;
    for w in windows {
        if w.len() != window_len {
            return Err(invalid(format!("window {} has length {} != {window_len}", w.id, w.len())));
        }
        out.write_all(&w.id.to_le_bytes())?;
        out.write_all(&w.label.map_or(-1i64, |l| l as i64).to_le_bytes())?;
        out.write_all(&w.session.to_le_bytes())?;
        for v in w.as_slice() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| format_err("dataset binary", e.to_string()))?;
    Ok(buf)
}

pub fn read_binary_split<T: Scalar>(path: &Path) -> Result<(usize, Vec<ImuWindow<T>>)> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_array::<8>(&mut r)? != BIN_MAGIC {
        return Err(format_err("dataset binary", "bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != BIN_VERSION {
        return Err(format_err("dataset binary", format!("unsupported version {version}")));
    }
    let channels = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if channels != CHANNELS {
        return Err(format_err("dataset binary", format!("{channels} channels")));
    }
    let window_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut windows = Vec::with_capacity(count);
    for _ in 0..count {
        let id = u64::from_le_bytes(read_array(&mut r)?);
        let label = i64::from_le_bytes(read_array(&mut r)?);
        let session = u32::from_le_bytes(read_array(&mut r)?);
        let values = (0..CHANNELS * window_len)
            .map(|_| read_array::<8>(&mut r).map(|b| T::lit(f64::from_le_bytes(b))))
            .collect::<Result<Vec<T>>>()?;
        let label = usize::try_from(label).ok();
        windows.push(ImuWindow::new(id, label, session, values)?);
    }
    Ok((window_len, windows))
}

pub fn write_dataset<T: Scalar>(dir: &Path, data: &DatasetSplit<T>, format: DatasetFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut counts = BTreeMap::new();
    for (name, windows) in data.splits() {
        counts.insert(name.to_string(), windows.len());
        match format {
            DatasetFormat::Csv => write_csv_split(&dir.join(format!("{name}.csv")), windows)?,
            DatasetFormat::Binary => write_binary_split(&dir.join(format!("{name}.bin")), windows, data.window_len)?,
        }
    }
    let manifest = Manifest {
        format,
        seed: data.seed,
        window_len: data.window_len,
        sample_rate_hz: data.sample_rate_hz,
        num_classes: data.num_classes,
        unknown_label: data.unknown_label,
        counts,
    };
    fs::write(dir.join(MANIFEST), manifest.to_text())?;
    Ok(())
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<DatasetSplit<T>> {
    let manifest = read_manifest(dir)?;
    let load = |name: &str| -> Result<Vec<ImuWindow<T>>> {
        let windows = match manifest.format {
            DatasetFormat::Csv => read_csv_split(&dir.join(format!("{name}.csv")), manifest.window_len)?,
            DatasetFormat::Binary => {
                let (len, ws) = read_binary_split(&dir.join(format!("{name}.bin")))?;
                if len != manifest.window_len {
                    return Err(format_err(
                        "dataset binary",
                        format!("{name}: window_len {len} disagrees with manifest"),
                    ));
                }
                ws
            }
        };
        if let Some(&n) = manifest.counts.get(name) {
            if n != windows.len() {
                return Err(format_err(
                    "dataset",
                    format!("{name}: manifest says {n} windows, found {}", windows.len()),
                ));
            }
        }
        Ok(windows)
    };
    Ok(DatasetSplit {
        train: load("train")?,
        validation: load("validation")?,
        test: load("test")?,
        unknown: load("unknown")?,
        seed: manifest.seed,
        window_len: manifest.window_len,
        sample_rate_hz: manifest.sample_rate_hz,
        num_classes: manifest.num_classes,
        unknown_label: manifest.unknown_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> DatasetSplit<f64> {
        let mut spec = SyntheticSpec::eight_activities(6, 2);
        spec.window_len = 16;
        spec.hop = 8;
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn csv_and_binary_round_trip_exactly() {
        let data = tiny();
        for format in [DatasetFormat::Csv, DatasetFormat::Binary] {
            let dir = tempfile::tempdir().unwrap();
            write_dataset(dir.path(), &data, format).unwrap();
            let back: DatasetSplit<f64> = read_dataset(dir.path()).unwrap();
            assert_eq!(back, data, "{format:?}");
        }
    }

    #[test]
    fn binary_header_layout() {
        let data = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_binary_split(&p, &data.test, 16).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], BIN_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 16);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize, data.test.len());
        assert_eq!(bytes.len(), 28 + data.test.len() * (8 + 8 + 4 + 6 * 16 * 8));
    }

    #[test]
    fn manifest_count_mismatch_is_reported() {
        let data = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, DatasetFormat::Csv).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let text = text.replace(&format!("count.test={}", data.test.len()), "count.test=1");
        fs::write(dir.path().join(MANIFEST), text).unwrap();
        assert!(read_dataset::<f64>(dir.path()).is_err());
    }

    #[test]
    fn truncated_csv_is_rejected() {
        let data = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_csv_split(&p, &data.train[..1]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let cut: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        fs::write(&p, cut).unwrap();
        assert!(read_csv_split::<f64>(&p, 16).is_err());
    }
}
