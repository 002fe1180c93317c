//! EDF reader/writer.
//!
//! Layout: a 256-byte main header, then 256 bytes per signal stored field
//! by field (all labels, then all transducers, ...), then data records. Each
//! record holds `samples_per_record` little-endian `i16` values per signal.
//! Header fields are space-padded printable ASCII.

use thiserror::Error;

use super::{Channel, Recording, SubjectMeta};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("EDF parse error at byte {offset}: {reason}")]
pub struct EdfError {
    pub offset: usize,
    pub reason: String,
}

fn fail<T>(offset: usize, reason: impl Into<String>) -> Result<T, EdfError> {
    Err(EdfError {
        offset,
        reason: reason.into(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub reserved: String,
    /// `-1` when unknown at write time; resolved from the file size on parse.
    pub n_records: i64,
    pub record_duration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
    pub reserved: String,
}

impl SignalHeader {
    pub fn to_physical(&self, digital: i16) -> f64 {
        let (dmin, dmax) = (self.digital_min as f64, self.digital_max as f64);
        (digital as f64 - dmin) * (self.physical_max - self.physical_min) / (dmax - dmin) + self.physical_min
    }

    pub fn to_digital(&self, physical: f64) -> i16 {
        let (dmin, dmax) = (self.digital_min as f64, self.digital_max as f64);
        let d = (physical - self.physical_min) * (dmax - dmin) / (self.physical_max - self.physical_min) + dmin;
        d.round().clamp(dmin, dmax) as i16
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfSignal {
    pub header: SignalHeader,
    pub digital: Vec<i16>,
}

impl EdfSignal {
    pub fn physical(&self) -> Vec<f64> {
        self.digital.iter().map(|&d| self.header.to_physical(d)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub signals: Vec<EdfSignal>,
}

const SIGNAL_FIELDS: [usize; 10] = [16, 80, 8, 8, 8, 8, 8, 80, 8, 32];

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn field(&mut self, width: usize) -> Result<(usize, &'a str), EdfError> {
        let at = self.pos;
        let Some(raw) = self.bytes.get(at..at + width) else {
            return fail(self.bytes.len(), "file truncated inside the header");
        };
        if let Some(i) = raw.iter().position(|&b| !(0x20..=0x7e).contains(&b)) {
            return fail(at + i, format!("non-ASCII header byte 0x{:02x}", raw[i]));
        }
        self.pos += width;
        let text = std::str::from_utf8(raw).expect("printable ASCII");
        Ok((at, text.trim_end()))
    }

    fn text(&mut self, width: usize) -> Result<String, EdfError> {
        Ok(self.field(width)?.1.to_string())
    }

    fn number<N: std::str::FromStr>(&mut self, width: usize, what: &str) -> Result<(usize, N), EdfError> {
        let (at, s) = self.field(width)?;
        match s.trim().parse() {
            Ok(v) => Ok((at, v)),
            Err(_) => fail(at, format!("cannot parse {what} from {s:?}")),
        }
    }
}

pub fn parse_edf(bytes: &[u8]) -> Result<EdfFile, EdfError> {
    let mut c = Cursor { bytes, pos: 0 };
    let version = c.text(8)?;
    let patient = c.text(80)?;
    let recording = c.text(80)?;
    let start_date = c.text(8)?;
    let start_time = c.text(8)?;
    let (hb_at, header_bytes): (usize, usize) = c.number(8, "header size")?;
    let reserved = c.text(44)?;
    let (nr_at, n_records): (usize, i64) = c.number(8, "record count")?;
    let (rd_at, record_duration): (usize, f64) = c.number(8, "record duration")?;
    let (ns_at, n_signals): (usize, usize) = c.number(4, "signal count")?;
    if n_signals == 0 {
        return fail(ns_at, "file declares no signals");
    }
    if header_bytes != 256 * (n_signals + 1) {
        return fail(
            hb_at,
            format!("header size {header_bytes} disagrees with {n_signals} signals"),
        );
    }
    if !(record_duration > 0.0) {
        return fail(rd_at, format!("record duration must be positive, got {record_duration}"));
    }

    let mut columns: Vec<Vec<(usize, String)>> = Vec::with_capacity(SIGNAL_FIELDS.len());
    for width in SIGNAL_FIELDS {
        let mut col = Vec::with_capacity(n_signals);
        for _ in 0..n_signals {
            let (at, s) = c.field(width)?;
            col.push((at, s.to_string()));
        }
        columns.push(col);
    }
    let num = |col: usize, i: usize, what: &str| -> Result<f64, EdfError> {
        let (at, s) = &columns[col][i];
        s.trim()
            .parse::<f64>()
            .or_else(|_| fail(*at, format!("cannot parse {what} from {s:?}")))
    };
    let int = |col: usize, i: usize, what: &str| -> Result<i64, EdfError> {
        let (at, s) = &columns[col][i];
        s.trim()
            .parse::<i64>()
            .or_else(|_| fail(*at, format!("cannot parse {what} from {s:?}")))
    };

    let mut headers = Vec::with_capacity(n_signals);
    for i in 0..n_signals {
        let digital_min = int(5, i, "digital minimum")?;
        let digital_max = int(6, i, "digital maximum")?;
        if digital_max <= digital_min {
            return fail(columns[6][i].0, format!("digital maximum {digital_max} <= minimum {digital_min}"));
        }
        if digital_min < i16::MIN as i64 || digital_max > i16::MAX as i64 {
            return fail(columns[5][i].0, "digital range exceeds 16 bits");
        }
        let physical_min = num(3, i, "physical minimum")?;
        let physical_max = num(4, i, "physical maximum")?;
        if physical_max == physical_min {
            return fail(columns[4][i].0, "physical range is empty");
        }
        let spr = int(8, i, "samples per record")?;
        if spr <= 0 {
            return fail(columns[8][i].0, "samples per record must be positive");
        }
        headers.push(SignalHeader {
            label: columns[0][i].1.clone(),
            transducer: columns[1][i].1.clone(),
            physical_dimension: columns[2][i].1.clone(),
            physical_min,
            physical_max,
            digital_min: digital_min as i32,
            digital_max: digital_max as i32,
            prefiltering: columns[7][i].1.clone(),
            samples_per_record: spr as usize,
            reserved: columns[9][i].1.clone(),
        });
    }

    let record_bytes: usize = headers.iter().map(|h| 2 * h.samples_per_record).sum();
    let available = bytes.len() - header_bytes;
    let n_records = match n_records {
        -1 => (available / record_bytes) as i64,
        n if n < 0 => return fail(nr_at, format!("invalid record count {n}")),
        n => n,
    };
    let needed = n_records as usize * record_bytes;
    if available < needed {
        return fail(
            bytes.len(),
            format!("file truncated: {n_records} records need {needed} data bytes, found {available}"),
        );
    }

    let mut digital: Vec<Vec<i16>> = headers
        .iter()
        .map(|h| Vec::with_capacity(h.samples_per_record * n_records as usize))
        .collect();
    let mut pos = header_bytes;
    for _ in 0..n_records {
        for (h, out) in headers.iter().zip(digital.iter_mut()) {
            let chunk = &bytes[pos..pos + 2 * h.samples_per_record];
            out.extend(chunk.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])));
            pos += chunk.len();
        }
    }

    Ok(EdfFile {
        header: EdfHeader {
            version,
            patient,
            recording,
            start_date,
            start_time,
            reserved,
            n_records,
            record_duration,
        },
        signals: headers
            .into_iter()
            .zip(digital)
            .map(|(header, digital)| EdfSignal { header, digital })
            .collect(),
    })
}

fn put(out: &mut Vec<u8>, s: &str, width: usize) {
    let bytes: Vec<u8> = s
        .bytes()
        .map(|b| if (0x20..=0x7e).contains(&b) { b } else { b'?' })
        .take(width)
        .collect();
    out.extend_from_slice(&bytes);
    out.extend(std::iter::repeat_n(b' ', width - bytes.len()));
}

/// Shortest decimal rendering of `v` that fits in `width` characters.
fn format_number(v: f64, width: usize) -> String {
    let plain = format!("{v}");
    if plain.len() <= width {
        return plain;
    }
    for decimals in (0..width).rev() {
        let s = format!("{v:.decimals$}");
        if s.len() <= width {
            return s;
        }
    }
    format!("{}", v.round() as i64)
}

pub fn write_edf(file: &EdfFile) -> Vec<u8> {
    let h = &file.header;
    let ns = file.signals.len();
    let spr: Vec<usize> = file.signals.iter().map(|s| s.header.samples_per_record).collect();
    let n_records = file
        .signals
        .iter()
        .map(|s| s.digital.len().div_ceil(s.header.samples_per_record))
        .max()
        .unwrap_or(0);

    let mut out = Vec::with_capacity(256 * (ns + 1));
    put(&mut out, &h.version, 8);
    put(&mut out, &h.patient, 80);
    put(&mut out, &h.recording, 80);
    put(&mut out, &h.start_date, 8);
    put(&mut out, &h.start_time, 8);
    put(&mut out, &(256 * (ns + 1)).to_string(), 8);
    put(&mut out, &h.reserved, 44);
    put(&mut out, &n_records.to_string(), 8);
    put(&mut out, &format_number(h.record_duration, 8), 8);
    put(&mut out, &ns.to_string(), 4);

    let fields: [Box<dyn Fn(&SignalHeader) -> String>; 10] = [
        Box::new(|s| s.label.clone()),
        Box::new(|s| s.transducer.clone()),
        Box::new(|s| s.physical_dimension.clone()),
        Box::new(|s| format_number(s.physical_min, 8)),
        Box::new(|s| format_number(s.physical_max, 8)),
        Box::new(|s| s.digital_min.to_string()),
        Box::new(|s| s.digital_max.to_string()),
        Box::new(|s| s.prefiltering.clone()),
        Box::new(|s| s.samples_per_record.to_string()),
        Box::new(|s| s.reserved.clone()),
    ];
    for (f, width) in fields.iter().zip(SIGNAL_FIELDS) {
        for s in &file.signals {
            put(&mut out, &f(&s.header), width);
        }
    }

    for r in 0..n_records {
        for (s, &n) in file.signals.iter().zip(&spr) {
            for i in r * n..(r + 1) * n {
                let v = s.digital.get(i).copied().unwrap_or(0);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

impl EdfFile {
    pub fn sample_rate(&self, signal: usize) -> f64 {
        self.signals[signal].header.samples_per_record as f64 / self.header.record_duration
    }

    /// Builds a file from physical-unit channels, quantizing each channel
    /// over its own `[min, max]` range with the full 16-bit digital range.
    /// Every channel length must be a whole number of records.
    pub fn from_physical(channels: &[Channel], record_duration: f64, patient: &str) -> Self {
        let signals = channels
            .iter()
            .map(|ch| {
                let spr = (ch.sample_rate * record_duration).round() as usize;
                let (lo, hi) = ch
                    .samples
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
                // bounds as they will read back from the 8-character fields
                let bound = |v: f64| format_number(v, 8).parse().unwrap_or(v);
                let header = SignalHeader {
                    label: ch.label.clone(),
                    transducer: String::new(),
                    physical_dimension: "uV".into(),
                    physical_min: bound(lo),
                    physical_max: bound(hi),
                    digital_min: i16::MIN as i32,
                    digital_max: i16::MAX as i32,
                    prefiltering: String::new(),
                    samples_per_record: spr,
                    reserved: String::new(),
                };
                let digital = ch.samples.iter().map(|&v| header.to_digital(v)).collect();
                EdfSignal { header, digital }
            })
            .collect::<Vec<_>>();
        let n_records = signals
            .iter()
            .map(|s| s.digital.len() / s.header.samples_per_record.max(1))
            .max()
            .unwrap_or(0) as i64;
        EdfFile {
            header: EdfHeader {
                version: "0".into(),
                patient: patient.into(),
                recording: String::new(),
                start_date: "01.01.00".into(),
                start_time: "00.00.00".into(),
                reserved: String::new(),
                n_records,
                record_duration,
            },
            signals,
        }
    }

    pub fn to_recording(&self, id: &str, dataset_id: &str, subject: SubjectMeta) -> Recording {
        Recording {
            id: id.into(),
            dataset_id: dataset_id.into(),
            channels: self
                .signals
                .iter()
                .enumerate()
                .map(|(i, s)| Channel {
                    label: s.header.label.clone(),
                    sample_rate: self.sample_rate(i),
                    samples: s.physical(),
                })
                .collect(),
            hypnogram: Default::default(),
            subject,
        }
    }
}
